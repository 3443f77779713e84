"""Scratch FD check of networks: classifier logits, transform (plain/STN)."""
import numpy as np
from ddaig import networks as N

rng = np.random.default_rng(11)
DT = np.float64


def check(label, analytic, fd, tol=1e-5):
    scale = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-3)
    err = np.abs(fd - analytic).max() / scale
    print(f"{label:40s} rel_err {err:.3e}")
    assert err < tol, (label, err)


# --- classifier ---
cfg = N.ClassifierConfig((1, 8, 8), 5, conv_channels=4, num_conv_blocks=2)
f = N.build_label_classifier(cfg, seed=3, dtype=DT)
x = rng.standard_normal((2, 1, 8, 8))
y, cache = f.apply_with_cache(x)
assert y.shape == (2, 5)
gy = rng.standard_normal(y.shape)
dx, grads = f.backward(gy, cache)

def loss_cls(xv):
    return float((f.apply(xv) * gy).sum())

h = 1e-6
fd = np.zeros_like(x)
it = np.nditer(x, flags=["multi_index"])
while not it.finished:
    i = it.multi_index
    xp = x.copy(); xp[i] += h
    xm = x.copy(); xm[i] -= h
    fd[i] = (loss_cls(xp) - loss_cls(xm)) / (2 * h)
    it.iternext()
check("classifier dx", dx, fd)

params = f.parameters
p0 = {k: v.copy() for k, v in params.items()}
for k in params:
    arr = params[k]
    fdp = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        arr[i] = p0[k][i] + h
        lp = loss_cls(x)
        arr[i] = p0[k][i] - h
        lm = loss_cls(x)
        arr[i] = p0[k][i]
        fdp[i] = (lp - lm) / (2 * h)
        it.iternext()
    check(f"classifier d{k}", grads[k], fdp)

# --- dotnet transform, plain ---
dcfg = N.DotNetConfig(input_channels=1, base_channels=4, num_res_blocks=1)
T = N.build_dotnet(dcfg, seed=5, dtype=DT)
# zero-init head would zero most gradients; randomize it for the check
T.parameters["final.weight"][...] = rng.standard_normal(T.parameters["final.weight"].shape) * 0.3
T.parameters["final.bias"][...] = rng.standard_normal(T.parameters["final.bias"].shape) * 0.1
x = rng.standard_normal((2, 1, 8, 8))
lam = 0.3
xt, cache = N.transform_with_cache(T, x, lam)
assert np.abs(xt - x).max() <= lam + 1e-12
gy = rng.standard_normal(xt.shape)
dx, grads = N.transform_backward(T, gy, cache)

def loss_T(xv):
    return float((N.transform(T, xv, lam) * gy).sum())

fd = np.zeros_like(x)
it = np.nditer(x, flags=["multi_index"])
while not it.finished:
    i = it.multi_index
    xp = x.copy(); xp[i] += h
    xm = x.copy(); xm[i] -= h
    fd[i] = (loss_T(xp) - loss_T(xm)) / (2 * h)
    it.iternext()
check("transform dx", dx, fd)

params = T.parameters
p0 = {k: v.copy() for k, v in params.items()}
for k in params:
    arr = params[k]
    fdp = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        arr[i] = p0[k][i] + h
        lp = loss_T(x)
        arr[i] = p0[k][i] - h
        lm = loss_T(x)
        arr[i] = p0[k][i]
        fdp[i] = (lp - lm) / (2 * h)
        it.iternext()
    check(f"transform d{k}", grads[k], fdp)

# --- dotnet transform with STN ---
scfg = N.DotNetConfig(input_channels=1, base_channels=4, num_res_blocks=1, use_stn=True)
TS = N.build_dotnet(scfg, seed=9, dtype=DT)
ps = TS.parameters
ps["final.weight"][...] = rng.standard_normal(ps["final.weight"].shape) * 0.3
# nudge localization off identity so theta gradients are live, but keep the
# warp inside the frame and off the integer lattice
ps["stn.fc.weight"][...] = rng.standard_normal(ps["stn.fc.weight"].shape) * 0.02
ps["stn.fc.bias"][...] = ps["stn.fc.bias"] + rng.uniform(-0.03, 0.03, 6)
x = rng.standard_normal((2, 1, 8, 8))
xt, cache = N.transform_with_cache(TS, x, lam)
gy = rng.standard_normal(xt.shape)
dx, grads = N.transform_backward(TS, gy, cache)

def loss_S(xv):
    return float((N.transform(TS, xv, lam) * gy).sum())

fd = np.zeros_like(x)
it = np.nditer(x, flags=["multi_index"])
while not it.finished:
    i = it.multi_index
    xp = x.copy(); xp[i] += h
    xm = x.copy(); xm[i] -= h
    fd[i] = (loss_S(xp) - loss_S(xm)) / (2 * h)
    it.iternext()
check("stn transform dx", dx, fd, tol=1e-5)

params = TS.parameters
p0 = {k: v.copy() for k, v in params.items()}
for k in params:
    arr = params[k]
    fdp = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        arr[i] = p0[k][i] + h
        lp = loss_S(x)
        arr[i] = p0[k][i] - h
        lm = loss_S(x)
        arr[i] = p0[k][i]
        fdp[i] = (lp - lm) / (2 * h)
        it.iternext()
    check(f"stn transform d{k}", grads[k], fdp, tol=1e-5)

# identity STN: warped == x bitwise
TS2 = N.build_dotnet(scfg, seed=9, dtype=np.float32)
xi = rng.standard_normal((3, 1, 8, 8)).astype(np.float32)
warped, theta = N.stn_forward(TS2.stn, xi)
assert np.array_equal(theta, np.tile(np.asarray(N.IDENTITY_AFFINE, np.float32), (3, 1)))
assert np.array_equal(warped, xi), "identity STN warp not bitwise"
print("identity STN warp bitwise: OK")

# zeroed dotnet -> transform == x
T0 = N.build_dotnet(dcfg, seed=5, dtype=np.float32)
for v in T0.parameters.values():
    v[...] = 0
xi = rng.standard_normal((2, 1, 6, 7)).astype(np.float32)
out = N.transform(T0, xi, 0.5)
assert np.array_equal(out, xi), "zeroed dotnet not identity"
print("zeroed dotnet identity: OK")

# fully convolutional: odd/rectangular sizes work
for shp in ((1, 1, 1, 1), (2, 1, 5, 3), (1, 1, 9, 2)):
    xi = rng.standard_normal(shp).astype(np.float32)
    out = N.transform(N.build_dotnet(dcfg, seed=1), xi, 0.3)
    assert out.shape == xi.shape
print("fully convolutional shapes: OK")
print("ALL NETWORK CHECKS PASSED")
