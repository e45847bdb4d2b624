#include <cstdio>
int main() { std::puts("ega: cli not wired yet"); return 0; }
