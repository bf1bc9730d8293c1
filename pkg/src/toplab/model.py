"""Small decoder-only transformer with objective-specific heads.

Three head layouts over a shared trunk of pre-norm blocks (RMS norm,
rotary-position attention, gated MLP):

  ntp   trunk of L blocks -> final norm -> NTP unembedding
  top   same trunk, plus a second unembedding on the same normed hidden
        state; zero extra transformer layers
  mtp   trunk of L - N blocks (parameter-matched mode) feeding N parallel
        single-block heads through a shared final norm and unembedding;
        head 0 is the next-token path, so N = 1 reproduces the ntp model
        exactly and the total block count stays L for every N

In the diagnostic (non-matched) mode the MTP trunk keeps L - 1 blocks so
deep head stacks can be studied without shrinking the trunk below one
block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .tensor import Tensor

MLP_MULT = 4
INIT_STD = 0.02

_CKPT_MAGIC = b"TOPCKPT1"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.float32: 0, np.float64: 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class SpecError(ValueError):
    """Model specification violates an architecture constraint."""


@dataclass(frozen=True)
class Objective:
    kind: str  # "ntp" | "mtp" | "top"
    future_tokens: int | None = None  # mtp only
    window: int | None = None  # top only

    def __post_init__(self):
        if self.kind not in ("ntp", "mtp", "top"):
            raise SpecError(f"unknown objective {self.kind!r}")
        if self.kind == "mtp" and (self.future_tokens is None or self.future_tokens < 1):
            raise SpecError("mtp objective needs future_tokens >= 1")
        if self.kind == "top" and (self.window is None or self.window < 1):
            raise SpecError("top objective needs window >= 1")

    @staticmethod
    def ntp() -> "Objective":
        return Objective("ntp")

    @staticmethod
    def mtp(future_tokens: int) -> "Objective":
        return Objective("mtp", future_tokens=future_tokens)

    @staticmethod
    def top(window: int) -> "Objective":
        return Objective("top", window=window)


@dataclass(frozen=True)
class ModelSpec:
    hidden_size: int = 128
    layers: int = 4
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 256
    rope_theta: float = 10_000.0
    objective: Objective = field(default_factory=Objective.ntp)
    tied_embeddings: bool = False
    mtp_parameter_matched: bool = True

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise SpecError(f"hidden size {self.hidden_size} not divisible by {self.n_heads} heads")
        if (self.hidden_size // self.n_heads) % 2 != 0:
            raise SpecError("per-head dimension must be even for rotary embeddings")
        if self.layers < 1:
            raise SpecError("need at least one layer")
        if self.objective.kind == "mtp":
            if self.trunk_layers < 0:
                raise SpecError(
                    f"mtp with {self.objective.future_tokens} heads needs >= "
                    f"{self.objective.future_tokens} nominal layers (got {self.layers})"
                )

    @property
    def trunk_layers(self) -> int:
        if self.objective.kind != "mtp":
            return self.layers
        if self.mtp_parameter_matched:
            return self.layers - self.objective.future_tokens
        return self.layers - 1

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "layers": self.layers,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rope_theta": self.rope_theta,
            "objective": {
                "kind": self.objective.kind,
                "future_tokens": self.objective.future_tokens,
                "window": self.objective.window,
            },
            "tied_embeddings": self.tied_embeddings,
            "mtp_parameter_matched": self.mtp_parameter_matched,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        obj = d["objective"]
        return ModelSpec(
            hidden_size=d["hidden_size"], layers=d["layers"], n_heads=d["n_heads"],
            vocab_size=d["vocab_size"], max_seq_len=d["max_seq_len"],
            rope_theta=d["rope_theta"],
            objective=Objective(obj["kind"], obj.get("future_tokens"), obj.get("window")),
            tied_embeddings=d.get("tied_embeddings", False),
            mtp_parameter_matched=d.get("mtp_parameter_matched", True),
        )


@dataclass
class ForwardOutput:
    ntp_logits: Tensor
    final_hidden: Tensor
    top_scores: Tensor | None = None
    mtp_logits: Tensor | None = None


def _block_names(prefix: str):
    return [f"{prefix}.{n}" for n in
            ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")]


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, v, h = spec.hidden_size, spec.vocab_size, MLP_MULT * spec.hidden_size
    block = {"attn_norm": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
             "mlp_norm": (d,), "w_gate": (d, h), "w_up": (d, h), "w_down": (h, d)}
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(spec.trunk_layers):
        for name, s in block.items():
            shapes[f"trunk.{i}.{name}"] = s
    if spec.objective.kind == "mtp":
        for n in range(spec.objective.future_tokens):
            for name, s in block.items():
                shapes[f"head.{n}.{name}"] = s
    shapes["final_norm"] = (d,)
    if not spec.tied_embeddings:
        shapes["unembed_ntp"] = (d, v)
    if spec.objective.kind == "top":
        shapes["unembed_top"] = (d, v)
    return shapes


def count_params(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def count_non_embedding_params(spec: ModelSpec) -> int:
    shapes = param_shapes(spec)
    return sum(int(np.prod(s)) for name, s in shapes.items()
               if name != "embed" and not name.startswith("unembed"))


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Scaled-normal init for all matrices, unit gains for norms.

    Draw order follows the name order of param_shapes so a given seed
    always produces the same model.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("_norm") or name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = tt.parameter(data, dtype=dtype)
    return params


def rope_tables(seq_len: int, head_dim: int, theta: float, dtype):
    half = head_dim // 2
    inv_freq = 1.0 / (theta ** (np.arange(half, dtype=np.float64) * 2.0 / head_dim))
    ang = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


class Model:
    """Parameter container plus forward passes for all three objectives."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        expected = param_shapes(spec)
        if set(params) != set(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise SpecError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise SpecError(f"{name}: shape {params[name].shape} != {shape}")
        self.spec = spec
        self.params = params
        self.dtype = params["embed"].dtype
        self._cos, self._sin = rope_tables(spec.max_seq_len, spec.head_dim,
                                           spec.rope_theta, self.dtype)
        self._causal = np.tril(np.ones((spec.max_seq_len, spec.max_seq_len), dtype=bool))

    @staticmethod
    def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> "Model":
        return Model(spec, init_params(spec, seed, dtype))

    def _block(self, prefix: str, h: Tensor, T: int) -> Tensor:
        p = self.params
        spec = self.spec
        B = h.shape[0]
        nh, dh = spec.n_heads, spec.head_dim
        cos, sin = self._cos[:T], self._sin[:T]
        a = tt.rms_norm(h, p[f"{prefix}.attn_norm"])
        q = tt.transpose(tt.reshape(tt.matmul(a, p[f"{prefix}.wq"]), (B, T, nh, dh)), (0, 2, 1, 3))
        k = tt.transpose(tt.reshape(tt.matmul(a, p[f"{prefix}.wk"]), (B, T, nh, dh)), (0, 2, 1, 3))
        v = tt.transpose(tt.reshape(tt.matmul(a, p[f"{prefix}.wv"]), (B, T, nh, dh)), (0, 2, 1, 3))
        q = tt.rope(q, cos, sin)
        k = tt.rope(k, cos, sin)
        scores = tt.scale(tt.bmm(q, tt.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = tt.masked_softmax(scores, self._causal[:T, :T])
        o = tt.reshape(tt.transpose(tt.bmm(att, v), (0, 2, 1, 3)), (B, T, spec.hidden_size))
        h = tt.add(h, tt.matmul(o, p[f"{prefix}.wo"]))
        m = tt.rms_norm(h, p[f"{prefix}.mlp_norm"])
        gated = tt.mul(tt.silu(tt.matmul(m, p[f"{prefix}.w_gate"])), tt.matmul(m, p[f"{prefix}.w_up"]))
        return tt.add(h, tt.matmul(gated, p[f"{prefix}.w_down"]))

    def _unembed_ntp(self, h: Tensor) -> Tensor:
        if self.spec.tied_embeddings:
            return tt.matmul(h, tt.transpose(self.params["embed"], (1, 0)))
        return tt.matmul(h, self.params["unembed_ntp"])

    def forward(self, ids: np.ndarray, materialize_top_scores: bool = True) -> ForwardOutput:
        """Causal forward pass; output at position t depends only on ids[:, :t+1]."""
        spec = self.spec
        if ids.ndim != 2:
            raise SpecError(f"ids must be (B, T), got {ids.shape}")
        T = ids.shape[1]
        if T > spec.max_seq_len:
            raise SpecError(f"sequence length {T} exceeds max {spec.max_seq_len}")
        h = tt.embedding(self.params["embed"], ids)
        for i in range(spec.trunk_layers):
            h = self._block(f"trunk.{i}", h, T)
        if spec.objective.kind == "mtp":
            per_head = []
            for n in range(spec.objective.future_tokens):
                hn = self._block(f"head.{n}", h, T)
                per_head.append(self._unembed_ntp(tt.rms_norm(hn, self.params["final_norm"])))
            return ForwardOutput(ntp_logits=per_head[0], final_hidden=h,
                                 mtp_logits=tt.stack(per_head, axis=2))
        hn = tt.rms_norm(h, self.params["final_norm"])
        out = ForwardOutput(ntp_logits=self._unembed_ntp(hn), final_hidden=hn)
        if spec.objective.kind == "top" and materialize_top_scores:
            out.top_scores = tt.matmul(hn, self.params["unembed_top"])
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def strip_to_inference(spec: ModelSpec, params: dict[str, Tensor]):
    """Drop auxiliary heads, leaving a pure next-token model.

    For top models only the extra unembedding goes away, so NTP logits are
    bit-identical. For mtp models the next-token head block becomes the
    final trunk block and the other heads are discarded.
    """
    if spec.objective.kind == "ntp":
        return spec, dict(params)
    if spec.objective.kind == "top":
        new_spec = replace(spec, objective=Objective.ntp())
        new_params = {k: v for k, v in params.items() if k != "unembed_top"}
        return new_spec, new_params
    trunk = spec.trunk_layers
    new_spec = replace(spec, objective=Objective.ntp(), layers=trunk + 1)
    new_params = {}
    for k, v in params.items():
        if k.startswith("head.0."):
            new_params[k.replace("head.0.", f"trunk.{trunk}.")] = v
        elif not k.startswith("head."):
            new_params[k] = v
    return new_spec, new_params


def generate_greedy(model: Model, prompt: np.ndarray, max_new: int) -> np.ndarray:
    """Iterative argmax decoding from the NTP head; deterministic."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1:
        raise SpecError("prompt must be a 1-D token array")
    if len(prompt) > model.spec.max_seq_len:
        raise SpecError(f"prompt length {len(prompt)} exceeds max {model.spec.max_seq_len}")
    toks = prompt.copy()
    for _ in range(max_new):
        ctx = toks[-model.spec.max_seq_len:]
        out = model.forward(ctx[None, :], materialize_top_scores=False)
        nxt = int(np.argmax(out.ntp_logits.data[0, -1]))
        toks = np.append(toks, nxt)
    return toks


# ---------------------------------------------------------------------------
# checkpoint container
#
# Little-endian layout:
#   magic "TOPCKPT1" | u32 container version | u32 header byte length
#   header JSON: {"format_version", "spec", "meta", "tensors": [names]}
#   per tensor: u16 name length | name utf-8 | u8 dtype code (0=f32, 1=f64)
#               | u8 ndim | u64 dims... | raw little-endian payload


def save_checkpoint(path, spec: ModelSpec, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    names = list(tensors)
    header = json.dumps({
        "format_version": _CKPT_VERSION,
        "spec": spec.to_dict(),
        "meta": meta or {},
        "tensors": names,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        f.write(header)
        for name in names:
            arr = np.ascontiguousarray(tensors[name])
            code = _DTYPE_CODES[arr.dtype.type]
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(_CODE_DTYPES[code], copy=False).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        tensors = {}
        for name in header["tensors"]:
            (nlen,) = struct.unpack("<H", f.read(2))
            got = f.read(nlen).decode("utf-8")
            if got != name:
                raise ValueError(f"checkpoint tensor order corrupt: {got!r} != {name!r}")
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            dt = _CODE_DTYPES[code]
            data = np.frombuffer(f.read(count * dt.itemsize), dtype=dt).reshape(shape)
            tensors[name] = data.astype(dt.base, copy=True)
        return spec, tensors, header["meta"]


def model_from_checkpoint(path) -> tuple[Model, dict]:
    spec, tensors, meta = load_checkpoint(path)
    shapes = param_shapes(spec)
    params = {name: tt.parameter(tensors[name], dtype=tensors[name].dtype.type)
              for name in shapes}
    return Model(spec, params), meta
