// expect: no-race
struct point {
    int x;
    int y;
};

struct point origin;

int main() {
    struct point q;
    q.x = 4;
    q.y = q.x + 1;
    origin.x = q.y;
    origin.y = 0;
    return origin.x;
}
