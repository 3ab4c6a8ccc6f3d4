#pragma once

namespace egc::cli {

/// Entry point of the command-line tool. Returns the process exit status.
int run(int argc, char** argv);

}  // namespace egc::cli
