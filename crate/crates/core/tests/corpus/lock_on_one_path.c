// expect: unknown
// The second thread may take a different lock than the first.
#include <pthread.h>

int g;
pthread_mutex_t m = PTHREAD_MUTEX_INITIALIZER;
pthread_mutex_t n = PTHREAD_MUTEX_INITIALIZER;

void *a(void *arg) {
    pthread_mutex_lock(&m);
    g = 1;
    pthread_mutex_unlock(&m);
    return NULL;
}

void *b(void *arg) {
    int d;
    if (d) {
        pthread_mutex_lock(&m);
        g = 2;
        pthread_mutex_unlock(&m);
    } else {
        pthread_mutex_lock(&n);
        g = 2;
        pthread_mutex_unlock(&n);
    }
    return NULL;
}

int main() {
    pthread_t t1, t2;
    pthread_create(&t1, NULL, a, NULL);
    pthread_create(&t2, NULL, b, NULL);
    pthread_join(t1, NULL);
    pthread_join(t2, NULL);
    return 0;
}
