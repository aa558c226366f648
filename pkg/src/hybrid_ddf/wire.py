"""Versioned little-endian byte layout for stacks.

::

    header      <H version> <I owner robot> <H slot count>
    slot        <I robot> <Q timestamp> <I realization count>
    realization <I object count> (<Q object id> <H class label>)*
                <d phi>
                <I variable count> (<B kind> <I owner> <Q index>)*
                lower triangle of info, row-major (f64)
                info vector (f64), linearization points x, y, theta (f64)

Only the lower triangle of the (symmetric) information matrix is sent.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import DecodeError
from .fusion import SlotEntry, Stack, StackSlot
from .gaussian import OBJECT, ROBOT, GaussianDensity, VariableKey
from .hybrid import ClassRealization

WIRE_VERSION = 1

_HEADER = struct.Struct("<HIH")
_SLOT = struct.Struct("<IQI")
_U32 = struct.Struct("<I")
_OBJ = struct.Struct("<QH")
_F64 = struct.Struct("<d")
_VAR = struct.Struct("<BIQ")

_KIND_CODE = {ROBOT: 0, OBJECT: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def serialize_stack(stack: Stack) -> bytes:
    out = bytearray(_HEADER.pack(WIRE_VERSION, stack.owner, len(stack.slots)))
    for rid in sorted(stack.slots):
        slot = stack.slots[rid]
        out += _SLOT.pack(slot.robot, slot.timestamp, len(slot.entries))
        for e in slot.entries:
            out += _U32.pack(len(e.realization))
            for o, c in e.realization.items:
                out += _OBJ.pack(o, c)
            out += _F64.pack(e.phi)
            xi = e.xi
            out += _U32.pack(len(xi.keys))
            for k in xi.keys:
                out += _VAR.pack(_KIND_CODE[k.kind], k.owner, k.index)
            tril = xi.info[np.tril_indices(xi.dim)]
            out += np.ascontiguousarray(tril, dtype="<f8").tobytes()
            out += np.ascontiguousarray(xi.vec, dtype="<f8").tobytes()
            out += np.ascontiguousarray(xi.points.reshape(-1), dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def unpack(self, st: struct.Struct):
        end = self.pos + st.size
        if end > len(self.data):
            raise DecodeError(f"truncated payload at byte {self.pos}")
        vals = st.unpack_from(self.data, self.pos)
        self.pos = end
        return vals

    def floats(self, n: int) -> np.ndarray:
        end = self.pos + 8 * n
        if end > len(self.data):
            raise DecodeError(f"truncated payload at byte {self.pos}")
        arr = np.frombuffer(self.data[self.pos : end], dtype="<f8").astype(float)
        self.pos = end
        return arr


def deserialize_stack(data: bytes) -> Stack:
    r = _Reader(bytes(data))
    version, owner, nslots = r.unpack(_HEADER)
    if version != WIRE_VERSION:
        raise DecodeError(f"unsupported wire version {version} (expected {WIRE_VERSION})")
    slots = {}
    for _ in range(nslots):
        rid, ts, nreal = r.unpack(_SLOT)
        entries = []
        for _ in range(nreal):
            (nobj,) = r.unpack(_U32)
            real = ClassRealization(tuple(r.unpack(_OBJ) for _ in range(nobj)))
            (phi,) = r.unpack(_F64)
            (nvar,) = r.unpack(_U32)
            keys = []
            for _ in range(nvar):
                code, vowner, index = r.unpack(_VAR)
                if code not in _CODE_KIND:
                    raise DecodeError(f"invalid variable kind code {code}")
                keys.append(VariableKey(_CODE_KIND[code], vowner, index))
            dim = 3 * nvar
            info = np.zeros((dim, dim))
            info[np.tril_indices(dim)] = r.floats(dim * (dim + 1) // 2)
            info = info + np.tril(info, -1).T
            vec = r.floats(dim)
            pts = r.floats(dim).reshape(nvar, 3)
            try:
                xi = GaussianDensity(keys, info, vec, pts)
            except ValueError as exc:
                raise DecodeError(str(exc)) from exc
            entries.append(SlotEntry(real, xi, phi))
        if rid in slots:
            raise DecodeError(f"duplicate slot for robot {rid}")
        slots[rid] = StackSlot(rid, ts, tuple(entries))
    if r.pos != len(r.data):
        raise DecodeError(f"{len(r.data) - r.pos} trailing bytes after stack payload")
    return Stack(owner, dict(sorted(slots.items())))
