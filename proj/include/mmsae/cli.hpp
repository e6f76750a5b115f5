// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands: synth, train, analyze, intervene,
// eval, report, validate.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or numeric
// error. Option values resolve as: command line, then --config JSON file,
// then MMSAE_<OPTION> environment variables, then built-in defaults.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace mmsae {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

inline constexpr std::uint64_t kDefaultCliSeed = 0xC0C0;

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmsae
