// SPDX-License-Identifier: Apache-2.0
//
// Placeholder entry point; the real CLI is wired up with the pipeline.
#include <cstdio>

int main() {
  std::puts("gerlab: not yet wired");
  return 2;
}
