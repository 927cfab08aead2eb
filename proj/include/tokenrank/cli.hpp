#pragma once

#include "tokenrank/core.hpp"

namespace tokenrank {

/// 0 success, 2 invalid input (arguments, formats, protocol), 3 corrupted
/// data, 1 anything else.
int exit_code_for(ErrorKind kind) noexcept;

/// Entry point of the `tokenrank` command-line tool. Subcommands: synth,
/// aggregate, pool, codebook, index, quantize, search, eval.
int run_cli(int argc, const char* const* argv);

}  // namespace tokenrank
