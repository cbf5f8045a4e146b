// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace diffpo::cli {

/// Subcommand dispatch: gen-data | pretrain | finetune | eval | profile | schedules.
/// Exit code 0 on success, 1 on validation/usage/IO errors, 2 on numeric or
/// runtime failures.
int run(int argc, const char* const* argv);

}  // namespace diffpo::cli
