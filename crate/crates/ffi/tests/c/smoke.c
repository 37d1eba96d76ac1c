#include <stdio.h>
#include <math.h>
#include "dimts.h"

int main(void) {
    double a = -0.5, d[2] = {0.1, 0.1}, b[2] = {1.0, 1.0}, c[2] = {1.0, 1.0};
    double x[2] = {1.0, 0.0}, y[2];
    DimtsStatus s = dimts_selective_scan(&a, d, b, c, x, 2, 1, 1, y);
    if (s != DIMTS_STATUS_OK) {
        fprintf(stderr, "scan failed: %s\n", dimts_last_error());
        return 1;
    }
    double abar = exp(-0.05);
    double h0 = (abar - 1.0) / -0.5;
    if (fabs(y[0] - h0) > 1e-14 || fabs(y[1] - abar * h0) > 1e-14) {
        fprintf(stderr, "unexpected output %g %g\n", y[0], y[1]);
        return 1;
    }
    DimtsModel *m = NULL;
    if (dimts_model_load("/nonexistent.ckpt", &m) != DIMTS_STATUS_DATA || m != NULL) {
        return 1;
    }
    printf("ok: %s\n", dimts_last_error());
    return 0;
}
