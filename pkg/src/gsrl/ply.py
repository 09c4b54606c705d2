"""Binary little-endian PLY export/import of Gaussian clouds.

Each vertex stores 14 float32 properties in a fixed order; any other property,
type or format is rejected so that round trips stay bit-exact.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch

from .errors import PlyParseError
from .gaussians import GaussianCloud

PROPERTIES = (
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "scale_x", "scale_y", "scale_z",
    "r", "g", "b",
    "opacity",
)
_SLICES = {"means": (0, 3), "quats": (3, 7), "scales": (7, 10), "colors": (10, 13), "opacities": (13, 14)}


def export_ply(cloud: GaussianCloud, path: Union[str, Path]) -> None:
    fields = cloud.detach().fields()
    table = np.concatenate(
        [fields[k].cpu().numpy().astype("<f4").reshape(len(cloud), -1) for k in _SLICES], axis=1
    )
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in PROPERTIES]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + np.ascontiguousarray(table).tobytes())


def _parse_header(data: bytes) -> tuple[int, int]:
    """Return (vertex count, payload offset)."""
    off = 0
    count = None
    props: list[str] = []
    expect_magic = True
    while True:
        end = data.find(b"\n", off)
        if end < 0:
            raise PlyParseError("header is not terminated by end_header", off)
        try:
            line = data[off:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyParseError("non-ASCII bytes in header", off) from None
        tokens = line.split()
        if expect_magic:
            if line != "ply":
                raise PlyParseError("missing 'ply' magic line", off)
            expect_magic = False
        elif not tokens or tokens[0] in ("comment", "obj_info"):
            pass
        elif tokens[0] == "format":
            if tokens[1:] != ["binary_little_endian", "1.0"]:
                raise PlyParseError(f"unsupported format {' '.join(tokens[1:])!r}", off)
        elif tokens[0] == "element":
            if len(tokens) != 3 or tokens[1] != "vertex" or count is not None:
                raise PlyParseError(f"unexpected element declaration {line!r}", off)
            try:
                count = int(tokens[2])
            except ValueError:
                raise PlyParseError(f"bad vertex count {tokens[2]!r}", off) from None
            if count < 0:
                raise PlyParseError("negative vertex count", off)
        elif tokens[0] == "property":
            if count is None:
                raise PlyParseError("property declared before element", off)
            if len(tokens) != 3 or tokens[1] not in ("float", "float32"):
                raise PlyParseError(f"unsupported property declaration {line!r}", off)
            if tokens[2] not in PROPERTIES:
                raise PlyParseError(f"unknown property {tokens[2]!r}", off)
            props.append(tokens[2])
        elif tokens[0] == "end_header":
            off = end + 1
            break
        else:
            raise PlyParseError(f"unrecognized header line {line!r}", off)
        off = end + 1
    if count is None:
        raise PlyParseError("no vertex element declared", off)
    if tuple(props) != PROPERTIES:
        raise PlyParseError(f"expected properties {', '.join(PROPERTIES)} in order, got {', '.join(props)}", off)
    return count, off


def import_ply(path: Union[str, Path]) -> GaussianCloud:
    data = Path(path).read_bytes()
    count, off = _parse_header(data)
    need = count * len(PROPERTIES) * 4
    have = len(data) - off
    if have < need:
        raise PlyParseError(f"truncated payload: missing {need - have} bytes", len(data))
    if have > need:
        raise PlyParseError(f"{have - need} trailing bytes after vertex payload", off + need)
    table = np.frombuffer(data, dtype="<f4", count=count * len(PROPERTIES), offset=off)
    table = table.reshape(count, len(PROPERTIES)).astype(np.float32)
    parts = {k: torch.from_numpy(table[:, a:b].copy()) for k, (a, b) in _SLICES.items()}
    parts["opacities"] = parts["opacities"].reshape(count)
    return GaussianCloud(**parts)
