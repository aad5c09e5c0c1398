/* Direct 3x3 same-padding convolution kernels, float32, channel-major.
 *
 * Layouts: inputs padded (C, N, H+2, W+2); outputs valid (O, N, H, W).
 * Single-threaded by design: callers parallelize across processes.
 */
#define PY_SSIZE_T_CLEAN
#define NPY_NO_DEPRECATED_API NPY_1_7_API_VERSION
#include <Python.h>
#include <numpy/arrayobject.h>

#define OBLK 6

static void fwd_one(const float *restrict xp, const float *restrict w,
                    const float *restrict bias, float *restrict out,
                    int relu, npy_intp C, npy_intp N, npy_intp O,
                    npy_intp H, npy_intp W, npy_intp n) {
    const npy_intp Wp = W + 2, Hp = H + 2;
    for (npy_intp ob = 0; ob < (O + OBLK - 1) / OBLK; ob++) {
        npy_intp o0 = ob * OBLK;
        npy_intp o1 = o0 + OBLK < O ? o0 + OBLK : O;
        for (npy_intp y = 0; y < H; y++) {
            float *restrict rows[OBLK];
            for (npy_intp o = o0; o < o1; o++) {
                float *r = out + (((size_t)o * N + n) * H + y) * W;
                rows[o - o0] = r;
                const float b = bias[o];
                for (npy_intp x = 0; x < W; x++) r[x] = b;
            }
            for (npy_intp c = 0; c < C; c++) {
                const float *restrict s0 = xp + (((size_t)c * N + n) * Hp + y) * Wp;
                const float *restrict s1 = s0 + Wp;
                const float *restrict s2 = s1 + Wp;
                for (npy_intp o = o0; o < o1; o++) {
                    const float *restrict wk = w + ((size_t)o * C + c) * 9;
                    float *restrict r = rows[o - o0];
                    const float w00 = wk[0], w01 = wk[1], w02 = wk[2];
                    const float w10 = wk[3], w11 = wk[4], w12 = wk[5];
                    const float w20 = wk[6], w21 = wk[7], w22 = wk[8];
                    for (npy_intp x = 0; x < W; x++) {
                        r[x] += w00 * s0[x] + w01 * s0[x + 1] + w02 * s0[x + 2]
                              + w10 * s1[x] + w11 * s1[x + 1] + w12 * s1[x + 2]
                              + w20 * s2[x] + w21 * s2[x + 1] + w22 * s2[x + 2];
                    }
                }
            }
            if (relu) {
                for (npy_intp o = o0; o < o1; o++) {
                    float *restrict r = rows[o - o0];
                    for (npy_intp x = 0; x < W; x++) r[x] = r[x] > 0.0f ? r[x] : 0.0f;
                }
            }
        }
    }
}

/* dx = full correlation of padded grad with the flipped kernel */
static void dx_one(const float *restrict gp, const float *restrict w,
                   float *restrict dx, npy_intp C, npy_intp N, npy_intp O,
                   npy_intp H, npy_intp W, npy_intp n) {
    const npy_intp Wp = W + 2, Hp = H + 2;
    for (npy_intp cb = 0; cb < (C + OBLK - 1) / OBLK; cb++) {
        npy_intp c0 = cb * OBLK;
        npy_intp c1 = c0 + OBLK < C ? c0 + OBLK : C;
        for (npy_intp y = 0; y < H; y++) {
            float *restrict rows[OBLK];
            for (npy_intp c = c0; c < c1; c++) {
                float *r = dx + (((size_t)c * N + n) * H + y) * W;
                rows[c - c0] = r;
                for (npy_intp x = 0; x < W; x++) r[x] = 0.0f;
            }
            for (npy_intp o = 0; o < O; o++) {
                const float *restrict s0 = gp + (((size_t)o * N + n) * Hp + y) * Wp;
                const float *restrict s1 = s0 + Wp;
                const float *restrict s2 = s1 + Wp;
                for (npy_intp c = c0; c < c1; c++) {
                    const float *restrict wk = w + ((size_t)o * C + c) * 9;
                    float *restrict r = rows[c - c0];
                    const float w00 = wk[8], w01 = wk[7], w02 = wk[6];
                    const float w10 = wk[5], w11 = wk[4], w12 = wk[3];
                    const float w20 = wk[2], w21 = wk[1], w22 = wk[0];
                    for (npy_intp x = 0; x < W; x++) {
                        r[x] += w00 * s0[x] + w01 * s0[x + 1] + w02 * s0[x + 2]
                              + w10 * s1[x] + w11 * s1[x + 1] + w12 * s1[x + 2]
                              + w20 * s2[x] + w21 * s2[x + 1] + w22 * s2[x + 2];
                    }
                }
            }
        }
    }
}

static void dw_one(const float *restrict xp, const float *restrict g,
                   float *restrict dw, float *restrict db,
                   npy_intp C, npy_intp N, npy_intp O,
                   npy_intp H, npy_intp W, npy_intp n) {
    const npy_intp Wp = W + 2, Hp = H + 2;
    for (npy_intp o = 0; o < O; o++) {
        const float *restrict go = g + ((size_t)o * N + n) * H * W;
        double bsum = 0.0;
        for (npy_intp i = 0; i < H * W; i++) bsum += go[i];
        db[o] += (float)bsum;
        for (npy_intp c = 0; c < C; c++) {
            float acc[9] = {0};
            for (npy_intp y = 0; y < H; y++) {
                const float *restrict gr = go + (size_t)y * W;
                const float *restrict s0 = xp + (((size_t)c * N + n) * Hp + y) * Wp;
                const float *restrict s1 = s0 + Wp;
                const float *restrict s2 = s1 + Wp;
                float a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0;
                float a20 = 0, a21 = 0, a22 = 0;
                for (npy_intp x = 0; x < W; x++) {
                    const float gv = gr[x];
                    a00 += gv * s0[x]; a01 += gv * s0[x + 1]; a02 += gv * s0[x + 2];
                    a10 += gv * s1[x]; a11 += gv * s1[x + 1]; a12 += gv * s1[x + 2];
                    a20 += gv * s2[x]; a21 += gv * s2[x + 1]; a22 += gv * s2[x + 2];
                }
                acc[0] += a00; acc[1] += a01; acc[2] += a02;
                acc[3] += a10; acc[4] += a11; acc[5] += a12;
                acc[6] += a20; acc[7] += a21; acc[8] += a22;
            }
            float *dst = dw + ((size_t)o * C + c) * 9;
            for (int k = 0; k < 9; k++) dst[k] += acc[k];
        }
    }
}

static int check(PyArrayObject *a, int ndim, const char *name) {
    if (PyArray_TYPE(a) != NPY_FLOAT32 || !PyArray_IS_C_CONTIGUOUS(a) ||
        PyArray_NDIM(a) != ndim) {
        PyErr_Format(PyExc_ValueError, "%s must be C-contiguous float32 with %d dims",
                     name, ndim);
        return 0;
    }
    return 1;
}

static PyObject *py_fwd(PyObject *self, PyObject *args) {
    PyArrayObject *xp, *w, *b, *out;
    int relu;
    if (!PyArg_ParseTuple(args, "O!O!O!O!i", &PyArray_Type, &xp, &PyArray_Type, &w,
                          &PyArray_Type, &b, &PyArray_Type, &out, &relu))
        return NULL;
    if (!check(xp, 4, "xp") || !check(w, 4, "w") || !check(b, 1, "b") ||
        !check(out, 4, "out"))
        return NULL;
    npy_intp C = PyArray_DIM(xp, 0), N = PyArray_DIM(xp, 1);
    npy_intp O = PyArray_DIM(w, 0);
    npy_intp H = PyArray_DIM(out, 2), W = PyArray_DIM(out, 3);
    if (PyArray_DIM(xp, 2) != H + 2 || PyArray_DIM(xp, 3) != W + 2 ||
        PyArray_DIM(w, 1) != C || PyArray_DIM(out, 0) != O ||
        PyArray_DIM(out, 1) != N || PyArray_DIM(b, 0) != O) {
        PyErr_SetString(PyExc_ValueError, "fwd: inconsistent shapes");
        return NULL;
    }
    const float *xpd = (const float *)PyArray_DATA(xp);
    const float *wd = (const float *)PyArray_DATA(w);
    const float *bd = (const float *)PyArray_DATA(b);
    float *od = (float *)PyArray_DATA(out);
    Py_BEGIN_ALLOW_THREADS
    for (npy_intp n = 0; n < N; n++)
        fwd_one(xpd, wd, bd, od, relu, C, N, O, H, W, n);
    Py_END_ALLOW_THREADS
    Py_RETURN_NONE;
}

static PyObject *py_dx(PyObject *self, PyObject *args) {
    PyArrayObject *gp, *w, *dx;
    if (!PyArg_ParseTuple(args, "O!O!O!", &PyArray_Type, &gp, &PyArray_Type, &w,
                          &PyArray_Type, &dx))
        return NULL;
    if (!check(gp, 4, "gp") || !check(w, 4, "w") || !check(dx, 4, "dx"))
        return NULL;
    npy_intp O = PyArray_DIM(gp, 0), N = PyArray_DIM(gp, 1);
    npy_intp C = PyArray_DIM(w, 1);
    npy_intp H = PyArray_DIM(dx, 2), W = PyArray_DIM(dx, 3);
    if (PyArray_DIM(gp, 2) != H + 2 || PyArray_DIM(gp, 3) != W + 2 ||
        PyArray_DIM(w, 0) != O || PyArray_DIM(dx, 0) != C || PyArray_DIM(dx, 1) != N) {
        PyErr_SetString(PyExc_ValueError, "dx: inconsistent shapes");
        return NULL;
    }
    const float *gpd = (const float *)PyArray_DATA(gp);
    const float *wd = (const float *)PyArray_DATA(w);
    float *dxd = (float *)PyArray_DATA(dx);
    Py_BEGIN_ALLOW_THREADS
    for (npy_intp n = 0; n < N; n++)
        dx_one(gpd, wd, dxd, C, N, O, H, W, n);
    Py_END_ALLOW_THREADS
    Py_RETURN_NONE;
}

static PyObject *py_dw(PyObject *self, PyObject *args) {
    PyArrayObject *xp, *g, *dw, *db;
    if (!PyArg_ParseTuple(args, "O!O!O!O!", &PyArray_Type, &xp, &PyArray_Type, &g,
                          &PyArray_Type, &dw, &PyArray_Type, &db))
        return NULL;
    if (!check(xp, 4, "xp") || !check(g, 4, "g") || !check(dw, 4, "dw") ||
        !check(db, 1, "db"))
        return NULL;
    npy_intp C = PyArray_DIM(xp, 0), N = PyArray_DIM(xp, 1);
    npy_intp O = PyArray_DIM(g, 0);
    npy_intp H = PyArray_DIM(g, 2), W = PyArray_DIM(g, 3);
    if (PyArray_DIM(xp, 2) != H + 2 || PyArray_DIM(xp, 3) != W + 2 ||
        PyArray_DIM(g, 1) != N || PyArray_DIM(dw, 0) != O || PyArray_DIM(dw, 1) != C ||
        PyArray_DIM(dw, 2) != 3 || PyArray_DIM(dw, 3) != 3 || PyArray_DIM(db, 0) != O) {
        PyErr_SetString(PyExc_ValueError, "dw: inconsistent shapes");
        return NULL;
    }
    const float *xpd = (const float *)PyArray_DATA(xp);
    const float *gd = (const float *)PyArray_DATA(g);
    float *dwd = (float *)PyArray_DATA(dw);
    float *dbd = (float *)PyArray_DATA(db);
    Py_BEGIN_ALLOW_THREADS
    for (npy_intp n = 0; n < N; n++)
        dw_one(xpd, gd, dwd, dbd, C, N, O, H, W, n);
    Py_END_ALLOW_THREADS
    Py_RETURN_NONE;
}

static PyMethodDef methods[] = {
    {"fwd", py_fwd, METH_VARARGS,
     "fwd(xp, w, b, out, relu): 3x3 conv on padded input, bias + optional relu"},
    {"dx", py_dx, METH_VARARGS, "dx(gp, w, dx): input gradient from padded grad"},
    {"dw", py_dw, METH_VARARGS, "dw(xp, g, dw, db): accumulate weight/bias grads"},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef moduledef = {
    PyModuleDef_HEAD_INIT, "_kernels", "float32 3x3 convolution kernels", -1, methods,
};

PyMODINIT_FUNC PyInit__kernels(void) {
    PyObject *m = PyModule_Create(&moduledef);
    if (!m) return NULL;
    import_array();
    return m;
}
