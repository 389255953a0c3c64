// expect: no-race
int data[5];
int found;

int main() {
    int i;
    data[0] = 4;
    data[1] = 9;
    data[2] = 2;
    data[3] = 7;
    data[4] = 1;
    found = -1;
    for (i = 0; i < 5; i++) {
        if (data[i] == 7) {
            found = i;
            break;
        }
    }
    return found;
}
