// placeholder while the pipeline lands
int main() { return 0; }
