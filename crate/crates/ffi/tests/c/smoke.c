#include <stdio.h>
#include <string.h>
#include "minirace.h"

static const char *RACY =
    "#include <pthread.h>\n"
    "int g;\n"
    "void *w(void *a) { g = 1; return NULL; }\n"
    "int main() {\n"
    "    pthread_t t;\n"
    "    pthread_create(&t, NULL, w, NULL);\n"
    "    g = 2;\n"
    "    pthread_join(t, NULL);\n"
    "    return 0;\n"
    "}\n";

int main(void) {
    MrProgram *p = NULL;
    MrReport *r = NULL;
    char *json = NULL;
    MrVerdict o;
    if (mr_program_parse(RACY, "racy.c", MR_MACHINE_LP64, &p) != MR_STATUS_OK) {
        fprintf(stderr, "parse: %s\n", mr_last_error());
        return 1;
    }
    if (mr_analyze(p, MR_MODE_COMBINED, 2, &r) != MR_STATUS_OK) {
        return 2;
    }
    if (mr_report_verdict(r) != MR_VERDICT_RACE || mr_report_must_count(r) == 0) {
        return 3;
    }
    if (mr_report_json(r, &json) != MR_STATUS_OK || strstr(json, "\"verdict\":\"race\"") == NULL) {
        return 4;
    }
    if (mr_oracle(p, 8, 4, 1000000, &o) != MR_STATUS_OK || o != MR_VERDICT_RACE) {
        return 5;
    }
    mr_string_free(json);
    mr_report_free(r);
    mr_program_free(p);
    if (mr_program_parse("int main( {", "bad.c", MR_MACHINE_LP64, &p) != MR_STATUS_FRONTEND || p != NULL) {
        return 6;
    }
    printf("ok %s\n", mr_version());
    return 0;
}
