"""Scratch FD check of every layer backward. Central differences, float64."""
import numpy as np
from collections import OrderedDict
from ddaig import layers as L


def fd_check(layer, x, name, h=1e-5, tol=1e-7, loss_seed=0):
    rng = np.random.default_rng(loss_seed)
    y, cache = layer.forward(x)
    gy = rng.standard_normal(y.shape)

    def loss_at(xv, pv=None):
        if pv is not None:
            for k, arr in layer.params().items():
                arr[...] = pv[k]
        yv, _ = layer.forward(xv)
        return float((yv * gy).sum())

    dx, grads = layer.backward(gy, cache)
    # input grad
    fd = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        fd[i] = (loss_at(xp) - loss_at(xm)) / (2 * h)
        it.iternext()
    scale = max(np.abs(fd).max(), np.abs(dx).max(), 1e-3)
    err = np.abs(fd - dx).max() / scale
    print(f"{name:32s} dx  rel_err {err:.3e}")
    assert err < tol, (name, "dx", err)
    # param grads
    p0 = {k: v.copy() for k, v in layer.params().items()}
    for k, arr in layer.params().items():
        fdp = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            pv = {kk: vv.copy() for kk, vv in p0.items()}
            pv[k][i] += h
            lp = loss_at(x, pv)
            pv[k][i] -= 2 * h
            lm = loss_at(x, pv)
            fdp[i] = (lp - lm) / (2 * h)
            it.iternext()
        for kk, vv in layer.params().items():
            vv[...] = p0[kk]
        scale = max(np.abs(fdp).max(), np.abs(grads[k]).max(), 1e-3)
        err = np.abs(fdp - grads[k]).max() / scale
        print(f"{name:32s} d{k:16s} rel_err {err:.3e}")
        assert err < tol, (name, k, err)


rng = np.random.default_rng(7)
DT = np.float64

x = rng.standard_normal((2, 3, 5, 6)).astype(DT)
fd_check(L.Conv2d(3, 4, 3, "zeros", rng=rng, dtype=DT), x, "conv3_zeros")
fd_check(L.Conv2d(3, 4, 3, "reflect", rng=rng, dtype=DT), x, "conv3_reflect")
fd_check(L.Conv2d(3, 4, 1, rng=rng, dtype=DT), x, "conv1")
x1 = rng.standard_normal((2, 2, 1, 4)).astype(DT)
fd_check(L.Conv2d(2, 3, 3, "reflect", rng=rng, dtype=DT), x1, "conv3_reflect_H1")
x2 = rng.standard_normal((2, 2, 4, 1)).astype(DT)
fd_check(L.Conv2d(2, 3, 3, "reflect", rng=rng, dtype=DT), x2, "conv3_reflect_W1")
x3 = rng.standard_normal((1, 2, 1, 1)).astype(DT)
fd_check(L.Conv2d(2, 3, 3, "reflect", rng=rng, dtype=DT), x3, "conv3_reflect_1x1")
fd_check(L.Linear(10, 4, rng=rng, dtype=DT), rng.standard_normal((3, 10)), "linear")
fd_check(L.ReLU(), rng.standard_normal((2, 3, 4, 4)) + 0.05, "relu")
fd_check(L.Tanh(), rng.standard_normal((2, 3, 4, 4)), "tanh")
fd_check(L.MaxPool2(), rng.standard_normal((2, 3, 4, 6)), "maxpool", tol=1e-6)
fd_check(L.InstanceNorm(), rng.standard_normal((2, 3, 4, 5)), "instnorm", tol=1e-6)
fd_check(L.GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)), "gap")
fd_check(L.ResidualBlock(3, "reflect", rng=rng, dtype=DT),
         rng.standard_normal((2, 3, 5, 5)), "resblock", tol=1e-6)

seq = L.Sequential([
    ("conv", L.Conv2d(2, 4, 3, "zeros", rng=rng, dtype=DT)),
    ("relu", L.ReLU()),
    ("pool", L.MaxPool2()),
    ("flat", L.Flatten()),
    ("fc", L.Linear(4 * 2 * 3, 5, rng=rng, dtype=DT)),
])
fd_check(seq, rng.standard_normal((2, 2, 4, 6)) + 0.01, "sequential", tol=1e-6)

# affine sampler: dx and dtheta
x = rng.standard_normal((2, 3, 6, 7))
theta = np.asarray([[0.9, 0.12, 0.05, -0.08, 1.05, -0.1],
                    [1.1, -0.2, 0.3, 0.15, 0.8, 0.2]], dtype=DT)
# keep sample coordinates off the integer lattice (bilinear kinks break FD)
theta += rng.uniform(-0.01, 0.01, size=theta.shape)
y, cache = L.affine_sample(x, theta)
gy = rng.standard_normal(y.shape)
dx, dtheta = L.affine_sample_backward(gy, cache)

def sample_loss(xv, tv):
    yv, _ = L.affine_sample(xv, tv)
    return float((yv * gy).sum())

h = 1e-6
fd = np.zeros_like(x)
it = np.nditer(x, flags=["multi_index"])
while not it.finished:
    i = it.multi_index
    xp = x.copy(); xp[i] += h
    xm = x.copy(); xm[i] -= h
    fd[i] = (sample_loss(xp, theta) - sample_loss(xm, theta)) / (2 * h)
    it.iternext()
err = np.abs(fd - dx).max() / max(np.abs(fd).max(), 1e-12)
print(f"{'affine_sample':32s} dx  rel_err {err:.3e}")
assert err < 1e-6, err
fdt = np.zeros_like(theta)
it = np.nditer(theta, flags=["multi_index"])
while not it.finished:
    i = it.multi_index
    tp = theta.copy(); tp[i] += h
    tm = theta.copy(); tm[i] -= h
    fdt[i] = (sample_loss(x, tp) - sample_loss(x, tm)) / (2 * h)
    it.iternext()
err = np.abs(fdt - dtheta).max() / max(np.abs(fdt).max(), 1e-12)
print(f"{'affine_sample':32s} dtheta rel_err {err:.3e}")
assert err < 1e-6, err

# identity warp is bitwise
xi = rng.standard_normal((3, 2, 8, 9)).astype(np.float32)
ti = np.tile(np.asarray(L.IDENTITY_AFFINE, dtype=np.float32), (3, 1))
yi, _ = L.affine_sample(xi, ti)
assert yi.dtype == np.float32
assert np.array_equal(yi, xi), "identity warp not bitwise"
print("identity warp bitwise: OK")
# H=1 / W=1 identity also exact
for shp in ((2, 1, 1, 5), (2, 1, 5, 1), (1, 1, 1, 1)):
    xs = rng.standard_normal(shp).astype(np.float32)
    ts = np.tile(np.asarray(L.IDENTITY_AFFINE, dtype=np.float32), (shp[0], 1))
    ys_, _ = L.affine_sample(xs, ts)
    assert np.array_equal(ys_, xs), shp
print("degenerate-axis identity bitwise: OK")
print("ALL LAYER CHECKS PASSED")
