#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::puts("vividforge: cli not wired yet");
  return 0;
}
