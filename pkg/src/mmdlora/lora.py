"""Low-rank adapters: creation, forward composition, merging, counting, I/O.

An adapter pairs a trainable down-projection A (r x k) with an up-projection
B (d x r), scaled by alpha/r. B starts at zero so a fresh adapter leaves its
host layer bit-identical; gradients reach only A and B, never the frozen
base weight.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError
from .tensor import SeededRng, TensorValue, matmul, transpose

INJECTABLE_LAYERS = ("q", "k", "v", "proj")

CKPT_MAGIC = "MMDLORA"
CKPT_VERSION = "v1"


@dataclass
class LoRAAdapter:
    a: TensorValue            # (r, k), trainable
    b: TensorValue            # (d, r), trainable, zero at creation
    rank: int
    alpha: float
    target: tuple[int, str]   # (block index, layer name)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Dense effective update (alpha/r) * B @ A, shape (d, k)."""
        return self.scale * (self.b.data @ self.a.data)

    def freeze(self):
        self.a.requires_grad = False
        self.b.requires_grad = False

    def unfreeze(self):
        self.a.requires_grad = True
        self.b.requires_grad = True


@dataclass
class AdapterSet:
    """All adapters for one target domain, keyed by (block, layer)."""

    domain: str
    adapters: dict[tuple[int, str], LoRAAdapter] = field(default_factory=dict)

    def params(self):
        for (block, layer), ad in sorted(self.adapters.items()):
            yield f"{self.domain}/block{block}.{layer}.A", ad.a
            yield f"{self.domain}/block{block}.{layer}.B", ad.b

    def freeze(self):
        for ad in self.adapters.values():
            ad.freeze()


def new_adapter(rng: SeededRng, d: int, k: int, rank: int, alpha: float,
                target: tuple[int, str]) -> LoRAAdapter:
    if rank <= 0 or rank > min(d, k):
        raise ConfigError(f"lora.rank must satisfy 0 < r <= min(d,k)={min(d, k)}, got {rank}")
    if alpha <= 0:
        raise ConfigError(f"lora.alpha must be positive, got {alpha}")
    bound = 1.0 / np.sqrt(rank)
    a = TensorValue(rng.uniform(-bound, bound, (rank, k)), requires_grad=True)
    b = TensorValue(np.zeros((d, rank)), requires_grad=True)
    return LoRAAdapter(a=a, b=b, rank=rank, alpha=float(alpha), target=target)


def new_adapter_set(rng: SeededRng, domain: str, n_blocks: int, layers,
                    d: int, rank: int, alpha: float) -> AdapterSet:
    for layer in layers:
        if layer not in INJECTABLE_LAYERS:
            raise ConfigError(f"lora.layers entries must be in {INJECTABLE_LAYERS}, got {layer!r}")
    out = AdapterSet(domain=domain)
    for block in range(n_blocks):
        for layer in layers:
            out.adapters[(block, layer)] = new_adapter(
                rng.derive("adapter", domain, block, layer), d, d, rank, alpha,
                (block, layer),
            )
    return out


def lora_linear(w0: TensorValue, adapter: LoRAAdapter | None, x: TensorValue) -> TensorValue:
    """y = x @ W0^T + (alpha/r) * (x @ A^T) @ B^T, with W0 read-only.

    With adapter None (or B still zero) this reproduces the base projection.
    """
    d, k = w0.data.shape
    if x.data.shape[-1] != k:
        raise ConfigError(f"lora_linear: input width {x.data.shape[-1]} does not match W0 (d={d}, k={k})")
    base = matmul(x, transpose(w0))
    if adapter is None:
        return base
    if adapter.a.data.shape[1] != k or adapter.b.data.shape[0] != d:
        raise ConfigError(
            f"adapter dims A{adapter.a.data.shape} B{adapter.b.data.shape} "
            f"do not match layer (d={d}, k={k})"
        )
    down = matmul(x, transpose(adapter.a))
    up = matmul(down, transpose(adapter.b))
    return base + up * adapter.scale


def merge(w0: TensorValue, adapter: LoRAAdapter) -> np.ndarray:
    """Dense W0 + (alpha/r) * B @ A; forward equals lora_linear."""
    d, k = w0.data.shape
    if adapter.a.data.shape[1] != k or adapter.b.data.shape[0] != d:
        raise ConfigError(
            f"merge: adapter dims A{adapter.a.data.shape} B{adapter.b.data.shape} "
            f"do not match W0 {w0.data.shape}"
        )
    return w0.data + adapter.delta()


def count_trainable(sets) -> int:
    """Total trainable entries: sum of r*(d+k) over all adapters."""
    total = 0
    for s in sets:
        for ad in s.adapters.values():
            total += ad.a.data.size + ad.b.data.size
    return total


def adapter_params(sets):
    """Flat (name, tensor) list across sets, in deterministic order."""
    out = []
    for s in sets:
        out.extend(s.params())
    return out


def sets_checksum(sets) -> str:
    h = hashlib.sha256()
    for s in sets:
        h.update(s.domain.encode())
        for (block, layer), ad in sorted(s.adapters.items()):
            h.update(f"{block}.{layer}".encode())
            h.update(np.ascontiguousarray(ad.a.data).tobytes())
            h.update(np.ascontiguousarray(ad.b.data).tobytes())
    return h.hexdigest()


# ---- checkpoint format ----
#
# Header:  MMDLORA v1 d=<d> k=<k> r=<r> alpha=<a> domains=<M>
# Records: <domain> <block> <layer> A|B <rows> <cols> followed by rows*cols
# decimal values, one per line, row-major, printed with 17 significant
# digits so the round-trip is value-exact.


def _fmt(x: float) -> str:
    return f"{x:.17g}"


class _Reader:
    """Line reader over raw bytes that tracks byte offsets for errors."""

    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def line(self) -> tuple[str, int]:
        if self.pos >= len(self.raw):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint at byte {self.pos}"
            )
        start = self.pos
        end = self.raw.find(b"\n", start)
        if end < 0:
            end = len(self.raw)
            self.pos = end
        else:
            self.pos = end + 1
        try:
            return self.raw[start:end].decode("utf-8").strip(), start
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.path}: undecodable bytes at byte {start}") from None

    def at_eof(self) -> bool:
        return self.raw.find(b"\n", self.pos) < 0 and not self.raw[self.pos:].strip()


def save_adapters(path, sets, d: int, k: int, rank: int, alpha: float):
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION} d={d} k={k} r={rank} alpha={_fmt(alpha)} domains={len(sets)}"]
    for s in sets:
        for (block, layer), ad in sorted(s.adapters.items()):
            for tag, mat in (("A", ad.a.data), ("B", ad.b.data)):
                rows, cols = mat.shape
                lines.append(f"{s.domain} {block} {layer} {tag} {rows} {cols}")
                lines.extend(_fmt(v) for v in mat.reshape(-1))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(reader: _Reader, expect: dict):
    line, off = reader.line()
    parts = line.split()
    if len(parts) != 7 or parts[0] != CKPT_MAGIC or parts[1] != CKPT_VERSION:
        raise CheckpointError(f"{reader.path}: bad header at byte {off}: {line!r}")
    fields = {}
    for part in parts[2:]:
        key, _, val = part.partition("=")
        fields[key] = val
    for key in ("d", "k", "r", "alpha", "domains"):
        if key not in fields:
            raise CheckpointError(f"{reader.path}: header missing field {key!r}")
    parsed = {
        "d": int(fields["d"]),
        "k": int(fields["k"]),
        "r": int(fields["r"]),
        "alpha": float(fields["alpha"]),
        "domains": int(fields["domains"]),
    }
    for key, want in expect.items():
        if key in ("alpha",):
            ok = abs(parsed[key] - want) < 1e-12
        else:
            ok = parsed[key] == want
        if not ok:
            raise CheckpointError(
                f"{reader.path}: checkpoint field {key}={parsed[key]} does not match config {key}={want}"
            )
    return parsed


def _read_matrix(reader: _Reader, rows: int, cols: int) -> np.ndarray:
    vals = np.empty(rows * cols)
    for i in range(rows * cols):
        line, off = reader.line()
        try:
            vals[i] = float(line)
        except ValueError:
            raise CheckpointError(f"{reader.path}: bad value at byte {off}: {line!r}") from None
    return vals.reshape(rows, cols)


def load_adapters(path, d: int, k: int, rank: int, alpha: float,
                  trainable: bool = False) -> list[AdapterSet]:
    """Read a checkpoint, validating dims against the configured values."""
    with open(path, "rb") as fh:
        raw = fh.read()
    reader = _Reader(raw, path)
    header = _parse_header(reader, {"d": d, "k": k, "r": rank, "alpha": alpha})

    sets: dict[str, AdapterSet] = {}
    order: list[str] = []
    pending: dict[tuple[str, int, str], dict[str, np.ndarray]] = {}
    while not reader.at_eof():
        line, off = reader.line()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise CheckpointError(f"{path}: bad record at byte {off}: {line!r}")
        domain, block_s, layer, tag, rows_s, cols_s = parts
        if layer not in INJECTABLE_LAYERS or tag not in ("A", "B"):
            raise CheckpointError(f"{path}: bad record at byte {off}: {line!r}")
        block, rows, cols = int(block_s), int(rows_s), int(cols_s)
        want = (rank, k) if tag == "A" else (d, rank)
        if (rows, cols) != want:
            raise CheckpointError(
                f"{path}: record {domain} {block} {layer} {tag} has shape "
                f"({rows}, {cols}), expected {want}"
            )
        mat = _read_matrix(reader, rows, cols)
        key = (domain, block, layer)
        pending.setdefault(key, {})[tag] = mat
        if domain not in sets:
            sets[domain] = AdapterSet(domain=domain)
            order.append(domain)

    if len(order) != header["domains"]:
        raise CheckpointError(
            f"{path}: header promises {header['domains']} domains, found {len(order)}"
        )
    for (domain, block, layer), mats in pending.items():
        if "A" not in mats or "B" not in mats:
            raise CheckpointError(
                f"{path}: adapter {domain} {block} {layer} is missing its "
                f"{'A' if 'A' not in mats else 'B'} record"
            )
        sets[domain].adapters[(block, layer)] = LoRAAdapter(
            a=TensorValue(mats["A"], requires_grad=trainable),
            b=TensorValue(mats["B"], requires_grad=trainable),
            rank=rank,
            alpha=alpha,
            target=(block, layer),
        )
    return [sets[name] for name in order]
