// expect: unknown
// The trylock result is never checked, so the write may happen unlocked.
#include <pthread.h>

int g;
pthread_mutex_t m = PTHREAD_MUTEX_INITIALIZER;

void *worker(void *arg) {
    int r;
    r = pthread_mutex_trylock(&m);
    g = 1;
    return NULL;
}

int main() {
    pthread_t t;
    pthread_create(&t, NULL, worker, NULL);
    pthread_mutex_lock(&m);
    g = 2;
    pthread_mutex_unlock(&m);
    pthread_join(t, NULL);
    return 0;
}
