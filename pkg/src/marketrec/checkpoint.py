"""MRSYS1 binary checkpoint container and model (de)serialization.

Container layout: the 6-byte magic ``MRSYS1``, then zero or more records.
Each record is a little-endian u32 name length, the UTF-8 name, a u32 rank,
``rank`` u32 dimensions, and the row-major float64 payload (little-endian).
Records are written in sorted name order so identical tensor dicts yield
byte-identical files.

Strings (vocabularies, id lists) ride along as UTF-8 bytes widened into
float64 tensors under the reserved ``__text__/`` name prefix.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

MAGIC = b"MRSYS1"
TEXT_PREFIX = "__text__/"
KIND_KEY = "__text__/model_kind"
_U32 = struct.Struct("<I")


def write_checkpoint(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 tensors to an MRSYS1 container."""
    for name in tensors:
        if not name:
            raise ValueError("tensor names must be non-empty")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(tensors):
            # asarray, not ascontiguousarray: the latter forces ndim >= 1 and
            # would silently turn scalars into length-1 vectors.
            arr = np.asarray(tensors[name], dtype=np.float64)
            name_bytes = name.encode("utf-8")
            fh.write(_U32.pack(len(name_bytes)))
            fh.write(name_bytes)
            fh.write(_U32.pack(arr.ndim))
            for d in arr.shape:
                fh.write(_U32.pack(d))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read an MRSYS1 container back into a name -> float64 array dict.

    A wrong magic or a short payload raises ValueError with the byte counts,
    so silent truncation cannot masquerade as a valid model.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an MRSYS1 container (magic {blob[:6]!r})")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(
                f"{path}: truncated container while reading {what}: "
                f"expected {n} bytes at offset {pos}, only {len(blob) - pos} remain"
            )
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = _U32.unpack(take(4, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = _U32.unpack(take(4, f"rank of {name!r}"))
        shape = tuple(_U32.unpack(take(4, f"dimension of {name!r}"))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = take(count * 8, f"payload of {name!r} ({count} float64 values)")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def pack_text(value: str) -> np.ndarray:
    """Encode a string as UTF-8 bytes widened to float64."""
    raw = value.encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def unpack_text(arr: np.ndarray) -> str:
    """Inverse of pack_text."""
    return np.asarray(arr, dtype=np.float64).astype(np.uint8).tobytes().decode("utf-8")


def pack_text_list(values) -> np.ndarray:
    return pack_text("\x1f".join(values)) if values else np.zeros(0)


def unpack_text_list(arr: np.ndarray) -> list[str]:
    if arr.size == 0:
        return []
    return unpack_text(arr).split("\x1f")


# --- model registry ---------------------------------------------------------
#
# Each model type contributes a pair of functions turning it into / out of a
# flat tensor dict.  Imports happen lazily inside the functions to keep this
# module free of circular dependencies.


def save_model(path: str, model: object) -> None:
    """Serialize any supported model object into an MRSYS1 file."""
    kind, tensors = _to_tensors(model)
    tensors[KIND_KEY] = pack_text(kind)
    write_checkpoint(path, tensors)


def load_model(path: str) -> object:
    """Inverse of save_model."""
    tensors = read_checkpoint(path)
    if KIND_KEY not in tensors:
        raise ValueError(f"{path}: container has no model kind record")
    kind = unpack_text(tensors.pop(KIND_KEY))
    builder = _BUILDERS.get(kind)
    if builder is None:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    return builder(tensors)


def _to_tensors(model: object) -> tuple[str, dict[str, np.ndarray]]:
    from marketrec.als import FactorModel
    from marketrec.content import ImageEncoder, TextEncoder, WordEmbeddings

    if isinstance(model, FactorModel):
        return "factor", {
            "row_factors": model.row_factors,
            "col_factors": model.col_factors,
            "hyper": np.array([model.dim, model.reg, model.alpha]),
            "objective_history": np.array(model.objective_history),
            TEXT_PREFIX + "row_ids": pack_text_list(model.row_ids),
            TEXT_PREFIX + "col_ids": pack_text_list(model.col_ids),
        }
    if isinstance(model, WordEmbeddings):
        ordered = sorted(model.vocab, key=model.vocab.get)
        return "word_embeddings", {
            "vectors": model.vectors,
            "training_loss": np.array(model.training_loss),
            TEXT_PREFIX + "vocab": pack_text_list(ordered),
        }
    if isinstance(model, TextEncoder):
        tensors: dict[str, np.ndarray] = {
            "emb_vectors": model.embeddings.vectors,
            TEXT_PREFIX + "emb_vocab": pack_text_list(
                sorted(model.embeddings.vocab, key=model.embeddings.vocab.get)
            ),
            TEXT_PREFIX + "categories": pack_text_list(model.categories),
            "widths": np.array(model.widths, dtype=np.float64),
            "meta": np.array([model.n_filters, model.repr_dim]),
            "hidden_W": model.hidden.params["W"],
            "hidden_b": model.hidden.params["b"],
            "out_W": model.out.params["W"],
            "out_b": model.out.params["b"],
        }
        for k, conv in enumerate(model.convs):
            tensors[f"conv{k}_K"] = conv.params["K"]
            tensors[f"conv{k}_b"] = conv.params["b"]
        return "text_encoder", tensors
    if isinstance(model, ImageEncoder):
        tensors = {"dims": np.array([model.in_dim, model.out_dim])}
        for k, layer in enumerate(model.layers):
            tensors[f"layer{k}_W"] = layer.params["W"]
            tensors[f"layer{k}_b"] = layer.params["b"]
        return "image_encoder", tensors
    from marketrec.hybrid import HybridEncoder

    if isinstance(model, HybridEncoder):
        tensors = {
            "block_dims": np.array(model.gate.block_dims, dtype=np.float64),
            "gate_W": model.gate.params["W"],
            "gate_b": model.gate.params["b"],
            TEXT_PREFIX + "sources": pack_text_list(model.sources),
        }
        for k, layer in enumerate(model.tower):
            tensors[f"tower{k}_W"] = layer.params["W"]
            tensors[f"tower{k}_b"] = layer.params["b"]
        return "hybrid_encoder", tensors
    from marketrec.sequence import SequenceModel

    if isinstance(model, SequenceModel):
        tensors = {
            "meta": np.array([model.lookback, model.horizon, model.emb_dim, model.hidden_dim]),
            "proj_W": model.proj.params["W"],
            "proj_b": model.proj.params["b"],
        }
        for name, arr in model.gru.params.items():
            tensors[f"gru_{name}"] = arr
        return "sequence", tensors
    from marketrec.bandit import DeepBandit, RegressionBandit, RowLayout

    if isinstance(model, RowLayout):
        return "row_layout", {TEXT_PREFIX + "submodels": pack_text_list(model.submodels)}
    if isinstance(model, RegressionBandit):
        enc = model.encoder
        return "regression_bandit", {
            "weights": model.weights,
            "hyper": np.array([model.ridge_lambda, model.theta, enc.n_buckets, enc.max_position]),
            TEXT_PREFIX + "submodels": pack_text_list(enc.submodels),
            TEXT_PREFIX + "devices": pack_text_list(enc.devices),
            TEXT_PREFIX + "weekdays": pack_text_list(enc.weekdays),
            TEXT_PREFIX + "landings": pack_text_list(enc.landings),
        }
    if isinstance(model, DeepBandit):
        enc = model.encoder
        tensors = {
            "hyper": np.array(
                [model.w_pos, model.w_neg, 1.0 if model.user_dim else 0.0, float(model.user_dim)]
            ),
            "bn_gamma": model.bn.params["gamma"],
            "bn_beta": model.bn.params["beta"],
            "bn_running_mean": model.bn.running_mean,
            "bn_running_var": model.bn.running_var,
            "training_loss": np.array(model.training_loss),
            TEXT_PREFIX + "submodels": pack_text_list(enc.submodels),
            TEXT_PREFIX + "devices": pack_text_list(enc.devices),
            TEXT_PREFIX + "weekdays": pack_text_list(enc.weekdays),
            TEXT_PREFIX + "landings": pack_text_list(enc.landings),
            TEXT_PREFIX + "locations": pack_text_list(enc.locations),
        }
        for k, layer in enumerate(model.tower):
            tensors[f"tower{k}_W"] = layer.params["W"]
            tensors[f"tower{k}_b"] = layer.params["b"]
        return "deep_bandit", tensors
    raise TypeError(f"no checkpoint serialization for {type(model).__name__}")


def _build_factor(t: dict[str, np.ndarray]):
    from marketrec.als import FactorModel

    dim, reg, alpha = t["hyper"]
    return FactorModel(
        row_ids=tuple(unpack_text_list(t[TEXT_PREFIX + "row_ids"])),
        col_ids=tuple(unpack_text_list(t[TEXT_PREFIX + "col_ids"])),
        row_factors=t["row_factors"],
        col_factors=t["col_factors"],
        dim=int(dim),
        reg=float(reg),
        alpha=float(alpha),
        objective_history=tuple(float(x) for x in t["objective_history"]),
    )


def _build_word_embeddings(t: dict[str, np.ndarray]):
    from marketrec.content import WordEmbeddings

    tokens = unpack_text_list(t[TEXT_PREFIX + "vocab"])
    return WordEmbeddings(
        vocab={tok: i for i, tok in enumerate(tokens)},
        vectors=t["vectors"],
        training_loss=tuple(float(x) for x in t["training_loss"]),
    )


def _build_text_encoder(t: dict[str, np.ndarray]):
    from marketrec.content import TextEncoder, WordEmbeddings

    tokens = unpack_text_list(t[TEXT_PREFIX + "emb_vocab"])
    emb = WordEmbeddings(vocab={tok: i for i, tok in enumerate(tokens)}, vectors=t["emb_vectors"])
    categories = tuple(unpack_text_list(t[TEXT_PREFIX + "categories"]))
    widths = tuple(int(w) for w in t["widths"])
    n_filters, repr_dim = (int(x) for x in t["meta"])
    enc = TextEncoder(emb, categories, widths, n_filters, repr_dim)
    for k, conv in enumerate(enc.convs):
        conv.params["K"][...] = t[f"conv{k}_K"]
        conv.params["b"][...] = t[f"conv{k}_b"]
    enc.hidden.params["W"][...] = t["hidden_W"]
    enc.hidden.params["b"][...] = t["hidden_b"]
    enc.out.params["W"][...] = t["out_W"]
    enc.out.params["b"][...] = t["out_b"]
    return enc


def _build_image_encoder(t: dict[str, np.ndarray]):
    from marketrec.content import ImageEncoder

    in_dim, out_dim = (int(x) for x in t["dims"])
    hidden_dim = t["layer1_W"].shape[1]
    enc = ImageEncoder(in_dim, out_dim, hidden_dim)
    for k, layer in enumerate(enc.layers):
        W = t[f"layer{k}_W"]
        if layer.params["W"].shape != W.shape:
            raise ValueError(
                f"image tower layer {k} has shape {W.shape}, expected {layer.params['W'].shape}"
            )
        layer.params["W"][...] = W
        layer.params["b"][...] = t[f"layer{k}_b"]
    return enc


def _build_hybrid(t: dict[str, np.ndarray]):
    from marketrec.hybrid import HybridEncoder

    block_dims = tuple(int(d) for d in t["block_dims"])
    sources = tuple(unpack_text_list(t[TEXT_PREFIX + "sources"]))
    n_tower = len([k for k in t if k.startswith("tower") and k.endswith("_W")])
    tower_widths = tuple(t[f"tower{k}_W"].shape[0] for k in range(n_tower - 1))
    out_dim = t[f"tower{n_tower - 1}_W"].shape[0]
    enc = HybridEncoder(
        dims=dict(zip(sources, block_dims)), tower_widths=tower_widths, out_dim=out_dim
    )
    enc.gate.params["W"][...] = t["gate_W"]
    enc.gate.params["b"][...] = t["gate_b"]
    for k, layer in enumerate(enc.tower):
        layer.params["W"][...] = t[f"tower{k}_W"]
        layer.params["b"][...] = t[f"tower{k}_b"]
    return enc


def _build_sequence(t: dict[str, np.ndarray]):
    from marketrec.sequence import SequenceModel

    lookback, horizon, emb_dim, hidden_dim = (int(x) for x in t["meta"])
    model = SequenceModel(lookback, horizon, emb_dim, hidden_dim)
    for name in model.gru.params:
        model.gru.params[name][...] = t[f"gru_{name}"]
    model.proj.params["W"][...] = t["proj_W"]
    model.proj.params["b"][...] = t["proj_b"]
    return model


def _build_regression_bandit(t: dict[str, np.ndarray]):
    from marketrec.bandit import BanditFeatureEncoder, RegressionBandit

    ridge_lambda, theta, n_buckets, max_position = t["hyper"]
    enc = BanditFeatureEncoder(
        submodels=unpack_text_list(t[TEXT_PREFIX + "submodels"]),
        devices=unpack_text_list(t[TEXT_PREFIX + "devices"]),
        weekdays=unpack_text_list(t[TEXT_PREFIX + "weekdays"]),
        landings=unpack_text_list(t[TEXT_PREFIX + "landings"]),
        theta=float(theta),
        n_buckets=int(n_buckets),
        max_position=int(max_position),
    )
    if t["weights"].shape[0] != enc.n_features + 1:
        raise ValueError(
            f"regression weights length {t['weights'].shape[0]} does not match "
            f"encoder feature count {enc.n_features} + intercept"
        )
    return RegressionBandit(weights=t["weights"], encoder=enc, ridge_lambda=float(ridge_lambda), theta=float(theta))


def _build_deep_bandit(t: dict[str, np.ndarray]):
    from marketrec.bandit import DeepBandit, DeepFeatureEncoder

    w_pos, w_neg, _, user_dim = t["hyper"]
    enc = DeepFeatureEncoder(
        submodels=unpack_text_list(t[TEXT_PREFIX + "submodels"]),
        devices=unpack_text_list(t[TEXT_PREFIX + "devices"]),
        weekdays=unpack_text_list(t[TEXT_PREFIX + "weekdays"]),
        landings=unpack_text_list(t[TEXT_PREFIX + "landings"]),
        locations=unpack_text_list(t[TEXT_PREFIX + "locations"]),
        user_dim=int(user_dim),
    )
    n_tower = len([k for k in t if k.startswith("tower") and k.endswith("_W")])
    hidden = tuple(t[f"tower{k}_W"].shape[0] for k in range(n_tower - 1))
    model = DeepBandit.build(enc, hidden=hidden, seed=0)
    model.bn.params["gamma"][...] = t["bn_gamma"]
    model.bn.params["beta"][...] = t["bn_beta"]
    model.bn.running_mean[...] = t["bn_running_mean"]
    model.bn.running_var[...] = t["bn_running_var"]
    for k, layer in enumerate(model.tower):
        layer.params["W"][...] = t[f"tower{k}_W"]
        layer.params["b"][...] = t[f"tower{k}_b"]
    model.w_pos = float(w_pos)
    model.w_neg = float(w_neg)
    model.training_loss = tuple(float(x) for x in t["training_loss"])
    return model


def _build_row_layout(t: dict[str, np.ndarray]):
    from marketrec.bandit import RowLayout

    return RowLayout(tuple(unpack_text_list(t[TEXT_PREFIX + "submodels"])))


_BUILDERS = {
    "factor": _build_factor,
    "row_layout": _build_row_layout,
    "word_embeddings": _build_word_embeddings,
    "text_encoder": _build_text_encoder,
    "image_encoder": _build_image_encoder,
    "hybrid_encoder": _build_hybrid,
    "sequence": _build_sequence,
    "regression_bandit": _build_regression_bandit,
    "deep_bandit": _build_deep_bandit,
}
