/* Elementwise loops for the decoder kernel, written so gcc can vectorise them
 * against glibc's libmvec (vector tanh / exp / log1p).  Compile with
 * -fopenmp-simd and link -lmvec. */
#ifndef VAEGUARD_VECMATH_H
#define VAEGUARD_VECMATH_H

#include <math.h>

#if defined(VAEGUARD_LIBMVEC)
#pragma omp declare simd notinbranch
extern double tanh(double);
#pragma omp declare simd notinbranch
extern double exp(double);
#pragma omp declare simd notinbranch
extern double log1p(double);
#endif

static inline void vg_bias_tanh(double *restrict h, const double *restrict b,
                                long rows, long n)
{
    for (long i = 0; i < rows; ++i) {
        double *restrict r = h + i * n;
#pragma omp simd
        for (long j = 0; j < n; ++j)
            r[j] = tanh(r[j] + b[j]);
    }
}

static inline void vg_bias(double *restrict h, const double *restrict b,
                           long rows, long n)
{
    for (long i = 0; i < rows; ++i) {
        double *restrict r = h + i * n;
#pragma omp simd
        for (long j = 0; j < n; ++j)
            r[j] += b[j];
    }
}

/* g *= 1 - h^2 */
static inline void vg_tanh_backprop(double *restrict g, const double *restrict h, long count)
{
#pragma omp simd
    for (long k = 0; k < count; ++k)
        g[k] *= 1.0 - h[k] * h[k];
}

/* Bernoulli log-likelihood per row with probabilities clamped to
 * [eps, 1 - eps]; delta receives d(-ll)/d(logit), zero where clamped. */
static inline void vg_bernoulli(const double *restrict a, const double *restrict x,
                                double *restrict delta, double *restrict ll,
                                long rows, long n, double eps)
{
    const double log_eps = log(eps), log1m_eps = log1p(-eps);
    for (long i = 0; i < rows; ++i) {
        const double *restrict ar = a + i * n;
        const double *restrict xr = x + i * n;
        double *restrict dr = delta + i * n;
        double acc = 0.0;
#pragma omp simd reduction(+:acc)
        for (long j = 0; j < n; ++j) {
            double v = ar[j];
            double e = exp(-fabs(v));
            double sp = log1p(e);
            double inv = 1.0 / (1.0 + e);
            double p = v >= 0.0 ? inv : e * inv;
            double logp = v >= 0.0 ? -sp : v - sp;
            double log1mp = logp - v;
            int lo = p < eps, hi = p > 1.0 - eps;
            logp = lo ? log_eps : (hi ? log1m_eps : logp);
            log1mp = lo ? log1m_eps : (hi ? log_eps : log1mp);
            dr[j] = (lo | hi) ? 0.0 : p - xr[j];
            acc += xr[j] * logp + (1.0 - xr[j]) * log1mp;
        }
        ll[i] = acc;
    }
}

static inline void vg_gaussian(const double *restrict a, const double *restrict x,
                               double *restrict delta, double *restrict ll,
                               long rows, long n, double log_2pi)
{
    for (long i = 0; i < rows; ++i) {
        const double *restrict ar = a + i * n;
        const double *restrict xr = x + i * n;
        double *restrict dr = delta + i * n;
        double acc = 0.0;
#pragma omp simd reduction(+:acc)
        for (long j = 0; j < n; ++j) {
            double r = xr[j] - ar[j];
            dr[j] = -r;
            acc += -0.5 * log_2pi - 0.5 * r * r;
        }
        ll[i] = acc;
    }
}

#endif
