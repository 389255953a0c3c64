// expect: no-race
// Each thread is joined before the next one is created.
#include <pthread.h>

int g;

void *first(void *arg) {
    g = 1;
    return NULL;
}

void *second(void *arg) {
    g = g + 1;
    return NULL;
}

int main() {
    pthread_t t;
    pthread_create(&t, NULL, first, NULL);
    pthread_join(t, NULL);
    pthread_create(&t, NULL, second, NULL);
    pthread_join(t, NULL);
    return g;
}
