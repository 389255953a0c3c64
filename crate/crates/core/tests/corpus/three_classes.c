// expect: race
// Two writers agree on a lock; the logger reads without it.
#include <pthread.h>

int state;
pthread_mutex_t m = PTHREAD_MUTEX_INITIALIZER;

void *up(void *arg) {
    pthread_mutex_lock(&m);
    state = state + 1;
    pthread_mutex_unlock(&m);
    return NULL;
}

void *down(void *arg) {
    pthread_mutex_lock(&m);
    state = state - 1;
    pthread_mutex_unlock(&m);
    return NULL;
}

void *logger(void *arg) {
    int seen;
    seen = state;
    return NULL;
}

int main() {
    pthread_t a, b, c;
    pthread_create(&a, NULL, up, NULL);
    pthread_create(&b, NULL, down, NULL);
    pthread_create(&c, NULL, logger, NULL);
    pthread_join(a, NULL);
    pthread_join(b, NULL);
    pthread_join(c, NULL);
    return 0;
}
