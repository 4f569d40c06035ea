"""Binary model-file format.

Layout (little-endian):

    magic "DNCEM1"  (6 bytes)
    uint32 x3       input_dim, hidden_dim, n_residual_blocks
    float64 x2      beta_min, beta_max
    float64 blob    affine map: mu (d), sqrt_cov (d*d), inv_sqrt_cov (d*d),
                    log_det_sqrt_cov (1)
    uint64          number of parameter floats
    float64 blob    network parameters in declaration order

Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .affine import AffineMap
from .energy import EnergyModel, NetConfig
from .sde import VpSchedule

MAGIC = b"DNCEM1"


class ModelFileError(RuntimeError):
    pass


def save_model(path, model: EnergyModel, amap: AffineMap) -> None:
    cfg = model.config
    d = cfg.input_dim
    parts = [MAGIC]
    parts.append(struct.pack("<III", d, cfg.hidden_dim, cfg.n_residual_blocks))
    parts.append(struct.pack("<dd", model.schedule.beta_min, model.schedule.beta_max))
    affine_blob = np.concatenate([
        amap.mu.ravel(), amap.sqrt_cov.ravel(), amap.inv_sqrt_cov.ravel(),
        np.array([amap.log_det_sqrt_cov]),
    ]).astype("<f8")
    parts.append(affine_blob.tobytes())
    flat = np.concatenate([p.ravel() for p in model.params]).astype("<f8")
    parts.append(struct.pack("<Q", flat.size))
    parts.append(flat.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> tuple[EnergyModel, AffineMap]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:6] != MAGIC:
        raise ModelFileError(f"{path}: bad magic {buf[:6]!r}, expected {MAGIC!r}")
    off = 6
    d, hidden, blocks = struct.unpack_from("<III", buf, off)
    off += 12
    beta_min, beta_max = struct.unpack_from("<dd", buf, off)
    off += 16
    n_affine = d + 2 * d * d + 1
    end = off + 8 * n_affine
    if len(buf) < end:
        raise ModelFileError(f"{path}: truncated affine block "
                             f"(need {end} bytes, have {len(buf)})")
    affine = np.frombuffer(buf[off:end], dtype="<f8")
    off = end
    mu = affine[:d].copy()
    sqrt_cov = affine[d:d + d * d].reshape(d, d).copy()
    inv_sqrt = affine[d + d * d:d + 2 * d * d].reshape(d, d).copy()
    amap = AffineMap(mu, sqrt_cov, inv_sqrt, float(affine[-1]))

    (n_floats,) = struct.unpack_from("<Q", buf, off)
    off += 8
    expected = off + 8 * n_floats
    if len(buf) != expected:
        raise ModelFileError(f"{path}: parameter blob length mismatch "
                             f"(expected {expected} bytes, have {len(buf)})")
    flat = np.frombuffer(buf[off:], dtype="<f8")
    cfg = NetConfig(d, hidden, blocks)
    if n_floats != cfg.n_params():
        raise ModelFileError(f"{path}: {n_floats} parameters for a network "
                             f"declaring {cfg.n_params()}")
    params = []
    pos = 0
    for shape in cfg.param_shapes():
        size = int(np.prod(shape))
        params.append(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    sched = VpSchedule(beta_min, beta_max)
    return EnergyModel(cfg, sched, params), amap
