"""On-disk container for coefficients, moments, factors and solver state.

Layout of every file (all integers and floats little-endian):

    bytes 0..7    magic b"MODM0001"
    bytes 8..15   uint64 length H of the JSON header
    bytes 16..    UTF-8 JSON header (sorted keys, no whitespace)
    then          raw float64 payload blobs, concatenated in header order

The header's "payload" list records name, dtype and shape of each blob.
Complex arrays are stored as float64 pairs (re, im) interleaved in C order;
volume coefficients use (degree, order, radius) index order.  Writing the
same object twice produces byte-identical files.
"""

import json

import numpy as np

from .model import (
    BlockOrthogonal,
    DistributionCoefficients,
    PolarGrid,
    VolumeCoefficients,
)

MAGIC = b"MODM0001"


def _payload_entry(name, arr):
    kind = "complex" if np.iscomplexobj(arr) else "real"
    return {"name": name, "kind": kind, "shape": list(arr.shape)}


def _to_bytes(arr):
    if np.iscomplexobj(arr):
        flat = np.ascontiguousarray(arr, dtype=np.complex128)
        return flat.view(np.float64).astype("<f8").tobytes()
    return np.ascontiguousarray(arr, dtype=np.float64).astype("<f8").tobytes()


def write_container(path, header, arrays):
    """arrays: list of (name, ndarray)."""
    header = dict(header)
    header["payload"] = [_payload_entry(name, arr) for name, arr in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([len(blob)], dtype="<u8").tobytes())
        fh.write(blob)
        for _, arr in arrays:
            fh.write(_to_bytes(arr))


def read_container(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a coefficient container")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        arrays = {}
        for entry in header["payload"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            if entry["kind"] == "complex":
                raw = np.frombuffer(fh.read(16 * n), dtype="<f8").astype(np.float64)
                arr = raw.view(np.complex128).reshape(shape)
            else:
                arr = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
            arrays[entry["name"]] = arr
    return header, arrays


# ---------------------------------------------------------------------------
# volumes


def save_volume(path, vol, extra=None):
    header = {
        "type": "volume",
        "bandlimit": vol.bandlimit,
        "real_volume": vol.real_volume,
        "grid": vol.grid.to_dict(),
        "meta": _json_safe(vol.meta),
    }
    if extra:
        header.update(_json_safe(extra))
    # (degree, order, radius) order: transpose each block to (order, radius)
    arrays = [(f"A{ell}", vol.blocks[ell].T) for ell in range(vol.bandlimit + 1)]
    write_container(path, header, arrays)


def load_volume(path):
    header, arrays = read_container(path)
    if header["type"] != "volume":
        raise ValueError(f"{path}: expected a volume file, got {header['type']}")
    grid = PolarGrid.from_dict(header["grid"])
    blocks = [arrays[f"A{ell}"].T.copy() for ell in range(header["bandlimit"] + 1)]
    return VolumeCoefficients(
        header["bandlimit"], grid, blocks, header["real_volume"], header.get("meta", {})
    )


# ---------------------------------------------------------------------------
# distributions


def save_distribution(path, dist, extra=None):
    header = {"type": "distribution", "max_degree": dist.max_degree, "meta": _json_safe(dist.meta)}
    if extra:
        header.update(_json_safe(extra))
    write_container(path, header, [("B", dist.coeffs)])


def load_distribution(path):
    header, arrays = read_container(path)
    if header["type"] != "distribution":
        raise ValueError(f"{path}: expected a distribution file, got {header['type']}")
    return DistributionCoefficients(header["max_degree"], arrays["B"].copy(), header.get("meta", {}))


# ---------------------------------------------------------------------------
# moment tables


def save_moments(path, tables, extra=None):
    header = {
        "type": "moments",
        "bandlimit": tables.bandlimit,
        "grid": tables.grid.to_dict(),
        "meta": _json_safe(tables.meta),
        "has_m1": tables.m1 is not None,
        "has_m2": tables.g is not None,
    }
    if extra:
        header.update(_json_safe(extra))
    arrays = []
    if tables.m1 is not None:
        arrays.append(("m1", tables.m1))
    if tables.g is not None:
        arrays.append(("G", tables.g))
    write_container(path, header, arrays)


def load_moments(path):
    from .moments import MomentTables

    header, arrays = read_container(path)
    if header["type"] != "moments":
        raise ValueError(f"{path}: expected a moments file, got {header['type']}")
    return MomentTables(
        bandlimit=header["bandlimit"],
        grid=PolarGrid.from_dict(header["grid"]),
        g=arrays.get("G"),
        m1=arrays.get("m1"),
        meta=header.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# Kam factors and solver state


def save_kam_factors(path, kam, extra=None):
    header = {
        "type": "kam_factors",
        "bandlimit": kam.bandlimit,
        "grid": kam.grid.to_dict(),
        "up_to_orthogonal": True,
        "meta": _json_safe(kam.meta),
    }
    if extra:
        header.update(_json_safe(extra))
    arrays = []
    for ell in range(kam.bandlimit + 1):
        arrays.append((f"Atilde{ell}", kam.a_tilde[ell].T))
        arrays.append((f"Ctilde{ell}", kam.c_tilde[ell]))
        arrays.append((f"eig{ell}", kam.eigenvalues[ell]))
    write_container(path, header, arrays)


def load_kam_factors(path):
    from .kam import KamFactors

    header, arrays = read_container(path)
    if header["type"] != "kam_factors":
        raise ValueError(f"{path}: expected a Kam-factor file, got {header['type']}")
    bandlimit = header["bandlimit"]
    return KamFactors(
        bandlimit=bandlimit,
        grid=PolarGrid.from_dict(header["grid"]),
        a_tilde=[arrays[f"Atilde{ell}"].T.copy() for ell in range(bandlimit + 1)],
        c_tilde=[arrays[f"Ctilde{ell}"].copy() for ell in range(bandlimit + 1)],
        eigenvalues=[arrays[f"eig{ell}"].copy() for ell in range(bandlimit + 1)],
        meta=header.get("meta", {}),
    )


def save_solver_state(path, state, extra=None):
    header = {
        "type": "solver_state",
        "bandlimit": state.orthogonal.bandlimit,
        "iterations": state.iterations,
        "status": state.status,
        "residual": state.residual,
        "meta": _json_safe(state.meta),
        "dist_degree": state.distribution.max_degree,
    }
    if extra:
        header.update(_json_safe(extra))
    arrays = [("residual_trace", np.asarray(state.residual_trace, dtype=float))]
    arrays.append(("B", state.distribution.coeffs))
    for ell, block in enumerate(state.orthogonal.blocks):
        arrays.append((f"O{ell}", block))
    write_container(path, header, arrays)


def load_solver_state(path):
    from .solver import SolverState

    header, arrays = read_container(path)
    if header["type"] != "solver_state":
        raise ValueError(f"{path}: expected a solver-state file, got {header['type']}")
    bandlimit = header["bandlimit"]
    blocks = [arrays[f"O{ell}"].copy() for ell in range(bandlimit + 1)]
    dist = DistributionCoefficients(header["dist_degree"], arrays["B"].copy())
    return SolverState(
        orthogonal=BlockOrthogonal(blocks),
        distribution=dist,
        iterations=header["iterations"],
        residual=header["residual"],
        residual_trace=list(arrays["residual_trace"]),
        status=header["status"],
        meta=header.get("meta", {}),
    )


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
