#include <cstdio>
int main() { std::puts("seqvr: placeholder"); return 0; }
