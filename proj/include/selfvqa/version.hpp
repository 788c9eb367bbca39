// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace selfvqa {
inline constexpr const char* kEngineVersion = "0.1.0";
}  // namespace selfvqa
