# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels: the per-rating SGD/SGLD inner loops.

Same update semantics as dpmf._pykernels, but the loops run without the GIL
so worker threads can update the shared factor matrices lock-free. Noise for
the sampling kernel comes either from a precomputed normal table (contiguous
segment reads at xorshift-random offsets) or from an inline Box-Muller
generator.
"""

from libc.math cimport sqrt, log, cos, sin, isfinite, M_PI

cdef extern from *:
    """
    #if defined(__GNUC__) || defined(__clang__)
    #define DPMF_PREFETCH(p) __builtin_prefetch((p), 0, 1)
    #else
    #define DPMF_PREFETCH(p)
    #endif
    """
    void DPMF_PREFETCH(const void *) nogil

BACKEND_NAME = "compiled"


cdef inline unsigned long long _xorshift(unsigned long long *s) nogil:
    cdef unsigned long long x = s[0]
    x ^= x >> 12
    x ^= x << 25
    x ^= x >> 27
    s[0] = x
    return x * <unsigned long long>2685821657736338717


cdef inline double _uniform(unsigned long long *s) nogil:
    return <double>(_xorshift(s) >> 11) * (1.0 / 9007199254740992.0)


cdef inline double _gauss_next(double[::1] table, long long tsize, long long seg_len,
                               unsigned long long *rst, double *bm, int mode) nogil:
    # rst: [xorshift state, segment position, segment remaining]
    cdef double u1, u2, r
    if mode == 0:
        if rst[2] == 0:
            rst[1] = _xorshift(&rst[0]) % <unsigned long long>tsize
            rst[2] = <unsigned long long>seg_len
        r = table[<long long>rst[1]]
        rst[1] += 1
        if rst[1] == <unsigned long long>tsize:
            rst[1] = 0
        rst[2] -= 1
        return r
    if bm[0] > 0.5:
        bm[0] = 0.0
        return bm[1]
    u1 = _uniform(&rst[0])
    while u1 <= 1e-300:
        u1 = _uniform(&rst[0])
    u2 = _uniform(&rst[0])
    r = sqrt(-2.0 * log(u1))
    bm[0] = 1.0
    bm[1] = r * sin(2.0 * M_PI * u2)
    return r * cos(2.0 * M_PI * u2)


cdef inline double _prefix(long long step, double[::1] var_base, double[::1] zeta_eta,
                           long long spe) nogil:
    cdef long long e
    if step <= 0:
        return 0.0
    e = (step - 1) / spe
    return var_base[e] + <double>(step - e * spe) * zeta_eta[e]


def sgd_block(double[:, ::1] U, double[:, ::1] V,
              double[::1] b_u, double[::1] b_m, double[::1] b_0, int bias,
              int[::1] users, int[::1] items, float[::1] ratings,
              long long[::1] order,
              double eta, double lam, int prefetch_stride=0):
    """Plain SGD over one block; returns first divergent triple index or -1."""
    cdef long long n = order.shape[0]
    cdef long long k = U.shape[1]
    cdef long long idx, t, pf, d
    cdef int i, j
    cdef double e, he, uo
    cdef double g = 1.0 - eta * lam
    cdef long long bad = -1
    with nogil:
        for idx in range(n):
            t = order[idx]
            i = users[t]
            j = items[t]
            if prefetch_stride > 0 and idx + prefetch_stride < n:
                pf = order[idx + prefetch_stride]
                DPMF_PREFETCH(&V[items[pf], 0])
            e = <double>ratings[t]
            for d in range(k):
                e -= U[i, d] * V[j, d]
            if bias:
                e -= b_u[i] + b_m[j] + b_0[0]
            if not isfinite(e):
                bad = t
                break
            he = eta * e
            for d in range(k):
                uo = U[i, d]
                U[i, d] = g * uo + he * V[j, d]
                V[j, d] = g * V[j, d] + he * uo
            if bias:
                b_u[i] = g * b_u[i] + he
                b_m[j] = g * b_m[j] + he
                b_0[0] += he
    return bad


def sgld_block(double[:, ::1] U, double[:, ::1] V,
               int[::1] users, int[::1] items, float[::1] ratings,
               long long[::1] order,
               double[::1] w_user,
               double eta, double lam_r, double[::1] Lu, double[::1] Lv,
               double N, double[::1] cnt_u, double[::1] cnt_v,
               long long[::1] last_u, long long[::1] last_v,
               long long[::1] clock,
               double[::1] var_base, double[::1] zeta_eta, long long spe,
               double zeta_eta_cur,
               double[::1] table, long long seg_len,
               unsigned long long[::1] rng_state, double[::1] bm_scratch,
               int noise_mode, double[::1] scratch, int prefetch_stride=0):
    """Posterior-sampling pass over a block with lazy deferred noise.

    rng_state/bm_scratch/scratch are per-worker buffers; the step clock is a
    shared counter (racy increments are tolerated in multi-worker runs).
    """
    cdef long long n = order.shape[0]
    cdef long long k = U.shape[1]
    cdef long long tsize = table.shape[0]
    cdef long long idx, t, step, a, d, pf
    cdef int i, j
    cdef double e, var, sd, c, fu, fv, pm1
    cdef double sd_step = sqrt(zeta_eta_cur)
    cdef long long bad = -1
    with nogil:
        for idx in range(n):
            t = order[idx]
            i = users[t]
            j = items[t]
            if prefetch_stride > 0 and idx + prefetch_stride < n:
                pf = order[idx + prefetch_stride]
                DPMF_PREFETCH(&V[items[pf], 0])
            step = clock[0] + 1
            clock[0] = step
            pm1 = _prefix(step - 1, var_base, zeta_eta, spe)
            a = last_u[i]
            if a < step - 1:
                var = pm1 - _prefix(a, var_base, zeta_eta, spe)
                if var > 0.0:
                    sd = sqrt(var)
                    for d in range(k):
                        U[i, d] += sd * _gauss_next(table, tsize, seg_len,
                                                    &rng_state[0], &bm_scratch[0], noise_mode)
            last_u[i] = step
            a = last_v[j]
            if a < step - 1:
                var = pm1 - _prefix(a, var_base, zeta_eta, spe)
                if var > 0.0:
                    sd = sqrt(var)
                    for d in range(k):
                        V[j, d] += sd * _gauss_next(table, tsize, seg_len,
                                                    &rng_state[0], &bm_scratch[0], noise_mode)
            last_v[j] = step
            e = <double>ratings[t]
            for d in range(k):
                e -= U[i, d] * V[j, d]
            if not isfinite(e):
                bad = t
                break
            c = N * w_user[i] * lam_r * e
            fu = N / cnt_u[i]
            fv = N / cnt_v[j]
            for d in range(k):
                scratch[d] = U[i, d]
                U[i, d] = (U[i, d] - eta * (fu * Lu[d] * U[i, d] - c * V[j, d])) \
                    + sd_step * _gauss_next(table, tsize, seg_len,
                                            &rng_state[0], &bm_scratch[0], noise_mode)
            for d in range(k):
                V[j, d] = (V[j, d] - eta * (fv * Lv[d] * V[j, d] - c * scratch[d])) \
                    + sd_step * _gauss_next(table, tsize, seg_len,
                                            &rng_state[0], &bm_scratch[0], noise_mode)
    return bad


def catchup_all(double[:, ::1] U, double[:, ::1] V,
                long long[::1] last_u, long long[::1] last_v,
                long long target,
                double[::1] var_base, double[::1] zeta_eta, long long spe,
                double[::1] table, long long seg_len,
                unsigned long long[::1] rng_state, double[::1] bm_scratch,
                int noise_mode):
    """Bring every row's deferred noise up to the target step."""
    cdef long long k = U.shape[1]
    cdef long long tsize = table.shape[0]
    cdef long long i, d
    cdef double pt, var, sd
    with nogil:
        pt = _prefix(target, var_base, zeta_eta, spe)
        for i in range(U.shape[0]):
            if last_u[i] < target:
                var = pt - _prefix(last_u[i], var_base, zeta_eta, spe)
                if var > 0.0:
                    sd = sqrt(var)
                    for d in range(k):
                        U[i, d] += sd * _gauss_next(table, tsize, seg_len,
                                                    &rng_state[0], &bm_scratch[0], noise_mode)
                last_u[i] = target
        for i in range(V.shape[0]):
            if last_v[i] < target:
                var = pt - _prefix(last_v[i], var_base, zeta_eta, spe)
                if var > 0.0:
                    sd = sqrt(var)
                    for d in range(k):
                        V[i, d] += sd * _gauss_next(table, tsize, seg_len,
                                                    &rng_state[0], &bm_scratch[0], noise_mode)
                last_v[i] = target
