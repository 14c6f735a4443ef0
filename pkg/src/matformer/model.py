"""The nested decoder-only transformer.

Every granularity of a block is a row prefix of the same weights: FFN
granularity ``i`` uses rows ``[0, m_i)`` of ``W1`` and ``W2``, and (when head
nesting is enabled) the first ``h_i`` heads of the attention projections. A
submodel is therefore nothing more than a :class:`LayerConfig` passed to
:meth:`MatDecoderModel.forward`.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from typing import Sequence

import numpy as np

from matformer import nn
from matformer.config import ModelConfig
from matformer.errors import CacheError, ConfigError, LengthError
from matformer.nn import Tensor


def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent RNG sub-stream derived from one seed and a stream name."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode())])


class KVCache:
    """Per-layer keys/values for one sequence being decoded.

    Storage is preallocated to the context length; ``truncate`` rolls the
    cache back without copying, and writes at an existing position overwrite
    what was there.
    """

    def __init__(self, widths: Sequence[int], context_len: int):
        self.widths = tuple(widths)
        self.context_len = context_len
        self.keys = [np.zeros((context_len, w)) for w in self.widths]
        self.values = [np.zeros((context_len, w)) for w in self.widths]
        self.length = 0

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    def check(self, layer: int, width: int) -> None:
        if self.widths[layer] != width:
            raise CacheError(f"layer {layer} cache holds width {self.widths[layer]}, attention needs {width}")

    def write(self, layer: int, start: int, k: np.ndarray, v: np.ndarray) -> None:
        stop = start + k.shape[0]
        self.keys[layer][start:stop] = k
        self.values[layer][start:stop] = v

    def view(self, layer: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        return self.keys[layer][:stop], self.values[layer][:stop]

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise CacheError(f"cannot truncate cache of length {self.length} to {length}")
        self.length = length

    def clone(self) -> KVCache:
        other = KVCache(self.widths, self.context_len)
        for j in range(self.n_layers):
            other.keys[j][:] = self.keys[j]
            other.values[j][:] = self.values[j]
        other.length = self.length
        return other


class MatDecoderModel:
    """Parameter store and forward pass of a universal MatFormer decoder.

    Args:
        config: Model shape.
        seed: Seeds the ``init`` RNG stream; weights are a pure function of it.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = params if params is not None else self._init_params(seed)
        self._check_shapes()

    # -- parameters -------------------------------------------------------

    def _layer_dims(self, j: int) -> tuple[int, int]:
        """Stored (ffn rows, attention width) of layer ``j``."""
        top = self.config.max_config()[j]
        return self.config.granularity.width(top), self.config.attn_width(top)

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = named_rng(seed, "init")
        std = cfg.init_std
        resid_std = std / math.sqrt(2 * cfg.n_layers)
        d = cfg.d_model
        params = {
            "tok_emb": nn.parameter(rng.normal(0.0, std, (cfg.vocab_size, d)), "tok_emb"),
            "pos_emb": nn.parameter(rng.normal(0.0, std, (cfg.context_len, d)), "pos_emb"),
        }
        for j in range(cfg.n_layers):
            rows, da = self._layer_dims(j)
            p = f"layers.{j}."
            shapes = {
                "ln1.gain": None,
                "ln1.bias": None,
                "attn.wq": ((da, d), std),
                "attn.wk": ((da, d), std),
                "attn.wv": ((da, d), std),
                "attn.wo": ((da, d), resid_std),
                "ln2.gain": None,
                "ln2.bias": None,
                "ffn.w1": ((rows, d), std),
                "ffn.w2": ((rows, d), resid_std),
            }
            for name, spec in shapes.items():
                if spec is None:
                    value = np.ones(d) if name.endswith("gain") else np.zeros(d)
                else:
                    shape, s = spec
                    value = rng.normal(0.0, s, shape)
                params[p + name] = nn.parameter(value, p + name)
        params["ln_f.gain"] = nn.parameter(np.ones(d), "ln_f.gain")
        params["ln_f.bias"] = nn.parameter(np.zeros(d), "ln_f.bias")
        return params

    def _check_shapes(self) -> None:
        cfg = self.config
        expected = {"tok_emb": (cfg.vocab_size, cfg.d_model), "pos_emb": (cfg.context_len, cfg.d_model)}
        for j in range(cfg.n_layers):
            rows, da = self._layer_dims(j)
            for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
                expected[f"layers.{j}.{name}"] = (da, cfg.d_model)
            expected[f"layers.{j}.ffn.w1"] = (rows, cfg.d_model)
            expected[f"layers.{j}.ffn.w2"] = (rows, cfg.d_model)
            for name in ("ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"):
                expected[f"layers.{j}.{name}"] = (cfg.d_model,)
        expected["ln_f.gain"] = (cfg.d_model,)
        expected["ln_f.bias"] = (cfg.d_model,)
        if set(expected) != set(self.params):
            raise ConfigError(f"parameter names differ from the config: {sorted(set(expected) ^ set(self.params))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def fingerprint(self) -> str:
        """SHA-256 over config and weights; identifies an encoder."""
        h = hashlib.sha256(repr(sorted(self.config.to_dict().items())).encode())
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def new_cache(self, config=None) -> KVCache:
        config = self.config.check_config(config if config is not None else self.config.max_config())
        return KVCache([self.config.attn_width(gran) for gran in config], self.config.context_len)

    # -- forward ----------------------------------------------------------

    def ffn_forward(self, x: Tensor, layer: int, gran: int) -> Tensor:
        """``sigma(x @ W1[:m].T) @ W2[:m]`` with ``m`` the granularity's width."""
        cfg = self.config
        m = cfg.granularity.width(gran)
        w1 = self.params[f"layers.{layer}.ffn.w1"]
        if m > w1.shape[0]:
            raise ConfigError(f"granularity {gran} needs {m} FFN rows, layer {layer} stores {w1.shape[0]}")
        w2 = self.params[f"layers.{layer}.ffn.w2"]
        hidden = nn.activation(nn.matmul(x, nn.transpose(nn.row_slice(w1, m))), cfg.sigma)
        return nn.matmul(hidden, nn.row_slice(w2, m))

    def attention_forward(self, x: Tensor, layer: int, gran: int, cache: KVCache | None = None) -> Tensor:
        """Causal self-attention over the first ``h_gran`` heads.

        Args:
            x: ``[B, T, d_model]`` normalized inputs. With a cache, ``B`` must
                be 1 and the tokens sit at positions ``cache.length ..``.
            layer: Layer index.
            gran: Granularity index (ignored for the head count unless heads
                are nested).
            cache: Optional cache; new keys/values are written into it. The
                caller advances ``cache.length`` after the last layer.
        """
        cfg = self.config
        heads = cfg.granularity.heads(gran, cfg.n_heads)
        dh = cfg.head_dim
        da = heads * dh
        pre = f"layers.{layer}.attn."
        if da > self.params[pre + "wq"].shape[0]:
            raise ConfigError(f"granularity {gran} needs {heads} heads beyond what layer {layer} stores")
        b, t, _ = x.shape

        def project(name: str) -> Tensor:
            w = nn.row_slice(self.params[pre + name], da)
            return nn.matmul(x, nn.transpose(w))

        q = nn.scale(project("wq"), 1.0 / math.sqrt(dh))
        k = project("wk")
        v = project("wv")
        start = 0
        if cache is not None:
            if b != 1:
                raise CacheError("a KV cache holds a single sequence")
            cache.check(layer, da)
            start = cache.length
            cache.write(layer, start, k.data[0], v.data[0])
            k_all, v_all = cache.view(layer, start + t)
            k = Tensor(k_all[None])
            v = Tensor(v_all[None])
        t_k = k.shape[1]

        def heads_first(z: Tensor, length: int) -> Tensor:
            return nn.transpose(nn.reshape(z, (b, length, heads, dh)), (0, 2, 1, 3))

        qh, kh, vh = heads_first(q, t), heads_first(k, t_k), heads_first(v, t_k)
        scores = nn.matmul(qh, nn.transpose(kh))
        mask = np.arange(t_k)[None, :] <= (start + np.arange(t))[:, None]
        att = nn.softmax(scores, mask)
        out = nn.matmul(att, vh)
        out = nn.reshape(nn.transpose(out, (0, 2, 1, 3)), (b, t, da))
        return nn.matmul(out, nn.row_slice(self.params[pre + "wo"], da))

    def hidden_states(self, tokens, config=None, cache: KVCache | None = None) -> Tensor:
        """Final layer-normed hidden states, ``[B, T, d_model]``."""
        cfg = self.config
        config = cfg.check_config(config if config is not None else cfg.max_config())
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be [T] or [B, T], got shape {tokens.shape}")
        b, t = tokens.shape
        start = cache.length if cache is not None else 0
        if start + t > cfg.context_len:
            raise LengthError(f"positions up to {start + t} exceed context length {cfg.context_len}")
        if cache is not None and cache.n_layers != cfg.n_layers:
            raise CacheError("cache layer count does not match the model")
        x = nn.add(
            nn.embedding_lookup(self.params["tok_emb"], tokens),
            nn.embedding_lookup(self.params["pos_emb"], np.arange(start, start + t)),
        )
        for j, gran in enumerate(config):
            p = f"layers.{j}."
            h = nn.layer_norm(x, self.params[p + "ln1.gain"], self.params[p + "ln1.bias"])
            x = nn.add(x, self.attention_forward(h, j, gran, cache))
            h = nn.layer_norm(x, self.params[p + "ln2.gain"], self.params[p + "ln2.bias"])
            x = nn.add(x, self.ffn_forward(h, j, gran))
        if cache is not None:
            cache.length = start + t
        return nn.layer_norm(x, self.params["ln_f.gain"], self.params["ln_f.bias"])

    def forward(self, tokens, config=None, cache: KVCache | None = None) -> Tensor:
        """Logits for every position.

        Args:
            tokens: ``[T]`` or ``[B, T]`` token ids.
            config: Per-layer granularities; defaults to the largest the model
                stores.
            cache: Optional KV cache (single sequence).

        Returns:
            ``[T, V]`` logits for 1-D input, else ``[B, T, V]``.
        """
        squeeze = np.ndim(tokens) == 1
        h = self.hidden_states(tokens, config, cache)
        logits = nn.matmul(h, nn.transpose(self.params["tok_emb"]))
        if squeeze:
            logits = nn.reshape(logits, logits.shape[1:])
        return logits

    __call__ = forward

    # -- accounting and extraction ---------------------------------------

    def param_count(self, config=None, include_embeddings: bool = False) -> int:
        from matformer.accounting import param_count

        return param_count(self.config, config, include_embeddings)

    def flops_per_token(self, config=None, phase: str = "infer") -> int:
        from matformer.accounting import flops_per_token

        return flops_per_token(self.config, config, phase)

    def extract_submodel(self, config) -> MatDecoderModel:
        """Standalone deep copy holding only the prefix slices ``config`` uses."""
        cfg = self.config
        config = cfg.check_config(config)
        sub_cfg = ModelConfig.from_dict({**cfg.to_dict(), "layer_max_gran": list(config)})
        params: dict[str, Tensor] = {}
        for name, p in self.params.items():
            data = p.data
            if name.startswith("layers."):
                j = int(name.split(".")[1])
                gran = config[j]
                if ".ffn." in name:
                    data = data[: cfg.granularity.width(gran)]
                elif ".attn." in name:
                    data = data[: cfg.attn_width(gran)]
            params[name] = nn.parameter(data.copy(), name)
        return MatDecoderModel(sub_cfg, params=params)
