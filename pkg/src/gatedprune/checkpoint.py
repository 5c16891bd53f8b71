"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"GPRUNECK"                 8 bytes magic
    uint32 version
    uint64 header length H
    H bytes UTF-8 JSON header   spec, gate metadata, epoch, history, array index
    float64 payload             arrays back to back, little-endian, C order

The header's ``arrays`` list holds ``[name, shape, offset]`` with offsets in
float64 elements from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gates import Gate
from .graph.spec import ModelSpec

MAGIC = b"GPRUNECK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: dict[str, np.ndarray]
    gates: list[Gate] = field(default_factory=list)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        arrays: list[tuple[str, np.ndarray]] = []
        arrays += [(f"state/{k}", v) for k, v in sorted(self.state.items())]
        arrays += [(f"optim/{k}", v) for k, v in sorted(self.optimizer.items())]
        gate_meta = []
        for g in self.gates:
            arrays.append((f"gate/{g.id}", g.phi))
            if g.original is not None:
                arrays.append((f"gate_original/{g.id}", g.original))
            gate_meta.append(
                {"granularity": g.granularity, "attachment": g.attachment, "noise": g.noise, "trainable": g.trainable, "has_original": g.original is not None}
            )
        index, chunks, offset = [], [], 0
        for name, a in arrays:
            a = np.ascontiguousarray(a, dtype="<f8")
            index.append([name, list(a.shape), offset])
            chunks.append(a.tobytes())
            offset += a.size
        header = {"spec": self.spec.to_dict(), "gates": gate_meta, "epoch": self.epoch, "history": self.history, "arrays": index}
        hb = json.dumps(header, sort_keys=True).encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        if len(raw) < 20:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack("<IQ", raw[8:20])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[20 : 20 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from None
        payload = raw[20 + hlen :]
        flat = np.frombuffer(payload, dtype="<f8", count=len(payload) // 8)
        arrays = {}
        for name, shape, off in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            if off + n > flat.size:
                raise CheckpointError(f"truncated checkpoint payload at {name}")
            arrays[name] = flat[off : off + n].reshape(shape).astype(np.float64)
        state = {k[6:]: v for k, v in arrays.items() if k.startswith("state/")}
        optim = {k[6:]: v for k, v in arrays.items() if k.startswith("optim/")}
        gates = []
        for m in header["gates"]:
            gid = f"{m['granularity']}:{m['attachment']}"
            g = Gate(m["granularity"], m["attachment"], arrays[f"gate/{gid}"], m["noise"], m["trainable"])
            if m["has_original"]:
                g.original = arrays[f"gate_original/{gid}"]
            gates.append(g)
        return cls(ModelSpec.from_dict(header["spec"]), state, gates, optim, header["epoch"], header["history"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def network(self, seed: int = 0):
        from .graph.runtime import instantiate

        return instantiate(self.spec, self.gates, seed, state=self.state)
