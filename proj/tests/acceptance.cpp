// SPDX-License-Identifier: Apache-2.0
//
// Runs every acceptance check through the `verify` command, then runs it a
// second time and compares the two result files byte for byte.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "difflab/cli.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "difflab-acceptance";
  const std::string seed = argc > 2 ? argv[2] : "0";
  const fs::path first = root / "run1", second = root / "run2";
  fs::remove_all(root);

  auto verify = [&](const fs::path& dir, std::ostream& out) {
    const std::string d = dir.string();
    const char* args[] = {"difflab", "--seed", seed.c_str(), "--out-dir", d.c_str(), "verify"};
    return difflab::cli::run(6, args, out, std::cerr);
  };

  const int code1 = verify(first, std::cout);
  if (code1 != difflab::cli::kOk && code1 != difflab::cli::kAcceptance) return code1;
  std::ostringstream quiet;
  const int code2 = verify(second, quiet);

  const std::string a = difflab::read_text(first / "results.json");
  const std::string b = code2 == difflab::cli::kOk || code2 == difflab::cli::kAcceptance
                            ? difflab::read_text(second / "results.json")
                            : std::string();
  const bool same = !a.empty() && a == b;
  std::cout << (same ? "PASS" : "FAIL") << "  criterion 15: identical result files from two runs with one seed"
            << std::endl;
  return code1 == difflab::cli::kOk && same ? EXIT_SUCCESS : EXIT_FAILURE;
}
