"""Binary checkpoint format.

Layout: the magic line ``MOECNN-CKPT``, a 16-digit decimal header length, a
newline, a JSON header (sorted keys), then the raw little-endian bytes of
every array in header order. No timestamps are stored, so saving the same
state twice yields identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MOECNN-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    adam_t: int = 0
    trackers: list[dict] = field(default_factory=list)
    rng_states: list[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def to_bytes(self) -> bytes:
        index = []
        blobs = []
        offset = 0
        for name, arr in self.arrays.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            raw = arr.astype(dt, copy=False).tobytes()
            index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": self.version,
            "config": self.config,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "step": self.step,
            "adam_t": self.adam_t,
            "trackers": self.trackers,
            "rng_states": self.rng_states,
            "arrays": index,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + f"{len(hbytes):016d}\n".encode() + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        if not raw.startswith(MAGIC):
            raise CheckpointError("not a moecnn checkpoint")
        pos = len(MAGIC)
        try:
            hlen = int(raw[pos:pos + 16])
        except ValueError as exc:
            raise CheckpointError("corrupt checkpoint header length") from exc
        pos += 17
        header = json.loads(raw[pos:pos + hlen])
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        body = memoryview(raw)[pos + hlen:]
        arrays = {}
        for entry in header["arrays"]:
            chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
            if len(chunk) != entry["nbytes"]:
                raise CheckpointError(f"truncated array {entry['name']}")
            arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            arrays[entry["name"]] = arr.copy()
        return cls(config=header["config"], config_hash=header["config_hash"], arrays=arrays,
                   epoch=header["epoch"], step=header["step"], adam_t=header["adam_t"],
                   trackers=header["trackers"], rng_states=header["rng_states"],
                   version=header["format_version"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
