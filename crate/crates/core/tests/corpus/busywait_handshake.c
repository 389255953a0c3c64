// expect: unknown
// An atomic flag orders the two writes to g.
#include <pthread.h>

atomic_int ready;
int g;

void *waiter(void *arg) {
    while (!ready);
    g = 1;
    return NULL;
}

int main() {
    pthread_t t;
    pthread_create(&t, NULL, waiter, NULL);
    g = 2;
    ready = 1;
    pthread_join(t, NULL);
    return 0;
}
