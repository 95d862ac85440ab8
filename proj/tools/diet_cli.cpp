#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "diet/evalcli/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees many large temporaries per step; keeping
  // them in the heap instead of fresh mmaps avoids page-fault storms.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
  mallopt(M_ARENA_MAX, 1);
#endif
  std::vector<std::string> args(argv + 1, argv + argc);
  return diet::run_cli(args, std::cout, std::cerr);
}
