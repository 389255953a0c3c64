// expect: no-race
int depth;

void level3() {
    depth = depth + 3;
}

void level2() {
    depth = depth + 2;
    level3();
}

void level1() {
    depth = 1;
    level2();
}

int main() {
    level1();
    return depth;
}
