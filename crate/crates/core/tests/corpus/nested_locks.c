// expect: no-race
#include <pthread.h>

int a;
int b;
pthread_mutex_t ma = PTHREAD_MUTEX_INITIALIZER;
pthread_mutex_t mb = PTHREAD_MUTEX_INITIALIZER;

void *both(void *arg) {
    pthread_mutex_lock(&ma);
    pthread_mutex_lock(&mb);
    a = a + 1;
    b = b + 1;
    pthread_mutex_unlock(&mb);
    pthread_mutex_unlock(&ma);
    return NULL;
}

void *only_b(void *arg) {
    pthread_mutex_lock(&mb);
    b = 0;
    pthread_mutex_unlock(&mb);
    return NULL;
}

int main() {
    pthread_t t1, t2;
    pthread_create(&t1, NULL, both, NULL);
    pthread_create(&t2, NULL, only_b, NULL);
    pthread_join(t1, NULL);
    pthread_join(t2, NULL);
    return 0;
}
