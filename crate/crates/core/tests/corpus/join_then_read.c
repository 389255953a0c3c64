// expect: no-race
#include <pthread.h>

int out;

void *producer(void *arg) {
    out = 7;
    return NULL;
}

int main() {
    pthread_t t;
    int v;
    pthread_create(&t, NULL, producer, NULL);
    pthread_join(t, NULL);
    v = out;
    out = v + 1;
    return 0;
}
