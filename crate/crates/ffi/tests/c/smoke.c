#include <stdio.h>
#include <string.h>
#include "nvsim.h"

static int fail(const char *what) {
    char msg[512];
    nvsim_last_error_message(msg, sizeof msg, NULL);
    fprintf(stderr, "%s: %s\n", what, msg);
    return 1;
}

int main(void) {
    NvsimModel *model = NULL;
    if (nvsim_model_new(NULL, 56e6, &model) != NVSIM_STATUS_OK) return fail("model");
    size_t n = 0;
    nvsim_model_transition_count(model, &n);
    nvsim_model_free(model);

    const char *cfg = "{\"zeeman_hz\": 18e6,"
                      " \"delta\": {\"start_hz\": -2e7, \"stop_hz\": 2e7, \"points\": 5},"
                      " \"modulation_offset\": {\"start_hz\": -2e7, \"stop_hz\": 2e7, \"points\": 9}}";
    NvsimResult *res = NULL;
    if (nvsim_run(NVSIM_EXPERIMENT_DARKMAP, cfg, NULL, &res) != NVSIM_STATUS_OK) return fail("run");
    size_t rows = 0, cols = 0;
    nvsim_result_shape(res, &rows, &cols);
    nvsim_result_free(res);

    if (nvsim_run(NVSIM_EXPERIMENT_PUMP, "{\"nope\": 1}", NULL, &res) != NVSIM_STATUS_PARSE) return 1;
    printf("%s %zu %zu %zu\n", nvsim_version(), n, rows, cols);
    return 0;
}
