import struct

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def away_from(x: np.ndarray, points, margin: float, rng) -> np.ndarray:
    """Resample entries of ``x`` whose magnitude lies within ``margin`` of any of ``points``."""
    x = np.array(x, dtype=np.float64)
    while True:
        bad = np.zeros(x.shape, dtype=bool)
        for p in points:
            bad |= np.abs(np.abs(x) - p) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(-1.5, 1.5, size=int(bad.sum()))


def random_geometry(rng):
    """A random valid conv geometry: (c, h, w, out, k, stride, pad) with integral output size."""
    while True:
        c = int(rng.integers(1, 6))
        o = int(rng.integers(1, 7))
        k = int(rng.choice([1, 2, 3, 5]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        h = int(rng.integers(k, 12))
        w = int(rng.integers(k, 12))
        if (h + 2 * pad - k) % stride == 0 and (w + 2 * pad - k) % stride == 0:
            return c, h, w, o, k, stride, pad


def random_ternary(rng, shape, p_zero=1 / 3):
    vals = rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=shape, p=[(1 - p_zero) / 2, p_zero, (1 - p_zero) / 2])
    return vals


def idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape) + arr.astype(np.uint8).tobytes()


def write_fake_mnist(root, n_train=256, n_test=64, seed=0):
    """Separable toy digits: class k lights up row block k."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        images = rng.integers(0, 40, (n, 28, 28)).astype(np.uint8)
        for i, k in enumerate(labels):
            images[i, 2 * k + 4:2 * k + 6, 4:24] = 250
        (root / f"{prefix}-images-idx3-ubyte").write_bytes(idx_bytes(images, 0x803))
        (root / f"{prefix}-labels-idx1-ubyte").write_bytes(idx_bytes(labels, 0x801))
    return root


# One line per acceptance criterion, printed in the terminal summary by conftest.
ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, ok: bool | None, text: str) -> str:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"criterion {number:2d}: {status}  {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line
