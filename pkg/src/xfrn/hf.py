"""Hugging Face adapter for Llama-style gated-MLP decoders.

Reads come from forward hooks on each decoder layer: the attention block's
output, the input of the post-attention norm (the pre-MLP residual), the input
of ``mlp.down_proj`` (the gated activation) and the layer output. Masks are
applied by a pre-hook that zeroes entries of the ``down_proj`` input at every
position. Captured hidden states precede the model's final norm.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np

from xfrn.errors import ConfigError, ModelError
from xfrn.model import ModelAdapter
from xfrn.store import DeactivationMask, ValueVectorTable

CACHE_ENV = "XFRN_CACHE"


class ByteTokenizer:
    """UTF-8 byte tokenizer (ids 3..258) with pad/bos/eos at 0/1/2.

    Lets randomly initialised models run without downloading a vocabulary.
    """

    pad_token_id, bos_token_id, eos_token_id = 0, 1, 2
    vocab_size = 259

    def encode(self, text: str, add_special_tokens: bool = True) -> list[int]:
        ids = [b + 3 for b in text.encode("utf-8")]
        return [self.bos_token_id, *ids] if add_special_tokens else ids

    def decode(self, ids, skip_special_tokens: bool = True) -> str:
        return bytes(int(i) - 3 for i in ids if int(i) >= 3).decode("utf-8", errors="replace")


def _import_torch():
    try:
        import torch
    except ImportError:
        raise ModelError("the Hugging Face adapter needs torch and transformers (pip install 'artifact[hf]')") from None
    return torch


def _first(x):
    return x[0] if isinstance(x, tuple) else x


class HfGatedAdapter(ModelAdapter):
    final_norm_applied = False

    def __init__(self, model, tokenizer, model_id: str, max_context: int | None = None):
        self.torch = _import_torch()
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.model_id = model_id
        try:
            self.blocks = list(model.model.layers)
            first = self.blocks[0]
            _ = first.mlp.down_proj, first.post_attention_layernorm, first.self_attn
        except AttributeError:
            raise ModelError(f"{model_id}: not a Llama-style gated-MLP decoder (model.layers[i].mlp.down_proj)") from None
        cfg = model.config
        self.num_layers = len(self.blocks)
        self.hidden_dim = int(cfg.hidden_size)
        self.mlp_dim = int(cfg.intermediate_size)
        self.max_context = int(max_context or getattr(cfg, "max_position_embeddings", 2048))
        self._mask_idx: dict[int, object] = {}
        for li, block in enumerate(self.blocks):
            block.mlp.down_proj.register_forward_pre_hook(self._mask_hook(li + 1))

    @classmethod
    def from_config(cls, cfg: dict) -> "HfGatedAdapter":
        """Load ``cfg["model"]`` (hub id or directory) with its tokenizer.

        ``cfg["tokenizer"] == "bytes"`` selects :class:`ByteTokenizer`.
        The cache directory comes from ``cfg["cache_dir"]`` or ``$XFRN_CACHE``.
        """
        _import_torch()
        from transformers import AutoModelForCausalLM, AutoTokenizer

        name = cfg.get("model")
        if not name:
            raise ConfigError("adapter config needs a 'model' entry")
        cache = cfg.get("cache_dir") or os.environ.get(CACHE_ENV)
        try:
            model = AutoModelForCausalLM.from_pretrained(name, cache_dir=cache, dtype="float32")
            if cfg.get("tokenizer") == "bytes":
                tok = ByteTokenizer()
            else:
                tok = AutoTokenizer.from_pretrained(cfg.get("tokenizer", name), cache_dir=cache)
        except OSError as exc:
            raise ModelError(f"cannot load model {name!r}: {exc}") from None
        return cls(model, tok, cfg.get("model_id", Path(str(name)).name), cfg.get("max_context"))

    # -- hooks ---------------------------------------------------------------

    def _mask_hook(self, layer: int):
        def hook(_module, args):
            idx = self._mask_idx.get(layer)
            if idx is None:
                return None
            x = args[0].clone()
            x[..., idx] = 0
            return (x, *args[1:])

        return hook

    @contextmanager
    def _masked(self, mask: DeactivationMask | None):
        self.check_mask(mask)
        torch = self.torch
        self._mask_idx = {l: torch.tensor(ix) for l, ix in (mask.by_layer().items() if mask else [])}
        try:
            yield
        finally:
            self._mask_idx = {}

    def _encode(self, text: str) -> list[int]:
        ids = list(self.tokenizer.encode(text))
        if len(ids) > self.max_context:
            raise ModelError(f"input of {len(ids)} tokens exceeds max context length {self.max_context}")
        if not ids:
            raise ModelError("empty token sequence")
        return ids

    def capture(self, texts: Sequence[str], mask: DeactivationMask | None) -> dict[str, np.ndarray]:
        torch = self.torch
        n, L = len(texts), self.num_layers
        caps = {
            "hidden_state": np.empty((n, L, self.hidden_dim), np.float32),
            "pre_mlp": np.empty((n, L, self.hidden_dim), np.float32),
            "attention_out": np.empty((n, L, self.hidden_dim), np.float32),
            "mlp_activation": np.empty((n, L, self.mlp_dim), np.float32),
        }
        encoded = [self._encode(t) for t in texts]
        # equal-length groups keep every final token unpadded
        groups: dict[int, list[int]] = {}
        for row, ids in enumerate(encoded):
            groups.setdefault(len(ids), []).append(row)
        current: list[int] = []
        handles = []

        def store(kind, li, value):
            caps[kind][current, li] = value[:, -1].detach().float().cpu().numpy()

        for li, block in enumerate(self.blocks):
            handles.append(block.self_attn.register_forward_hook(
                lambda _m, _a, out, li=li: store("attention_out", li, _first(out))))
            handles.append(block.post_attention_layernorm.register_forward_pre_hook(
                lambda _m, args, li=li: store("pre_mlp", li, args[0])))
            handles.append(block.register_forward_hook(
                lambda _m, _a, out, li=li: store("hidden_state", li, _first(out))))
            # registered after the mask hook, so it sees the masked activation
            handles.append(block.mlp.down_proj.register_forward_pre_hook(
                lambda _m, args, li=li: store("mlp_activation", li, args[0])))
        try:
            with self._masked(mask), torch.no_grad():
                for length in sorted(groups):
                    current[:] = groups[length]
                    ids = torch.tensor([encoded[r] for r in current])
                    self.model(input_ids=ids, use_cache=False)
        finally:
            for h in handles:
                h.remove()
        return caps

    def generate(self, prompt: str, mask: DeactivationMask | None, max_new_tokens: int) -> str:
        torch = self.torch
        ids = self._encode(prompt)
        if len(ids) + max_new_tokens > self.max_context:
            raise ModelError(f"generation exceeds max context length {self.max_context}")
        eos = getattr(self.tokenizer, "eos_token_id", None)
        pad = getattr(self.tokenizer, "pad_token_id", None)
        with self._masked(mask), torch.no_grad():
            out = self.model.generate(
                torch.tensor([ids]),
                attention_mask=torch.ones(1, len(ids), dtype=torch.long),
                do_sample=False,
                max_new_tokens=max_new_tokens,
                eos_token_id=eos,
                pad_token_id=pad if pad is not None else eos,
            )
        return self.tokenizer.decode(out[0, len(ids):].tolist(), skip_special_tokens=True)

    def value_table(self) -> ValueVectorTable:
        values = {}
        for li, block in enumerate(self.blocks):
            w = block.mlp.down_proj.weight.detach().float().cpu().numpy()  # (d, d_m)
            values[li + 1] = np.ascontiguousarray(w.T)
        return ValueVectorTable(self.model_id, values)

    def mlp_output(self, text: str) -> np.ndarray:
        """Final-token MLP output per layer, ``(L, d)``; used to check the decomposition."""
        torch = self.torch
        outs = []
        handles = [b.mlp.register_forward_hook(lambda _m, _a, o: outs.append(o[0, -1].detach().float().numpy()))
                   for b in self.blocks]
        try:
            with torch.no_grad():
                self.model(input_ids=torch.tensor([self._encode(text)]), use_cache=False)
        finally:
            for h in handles:
                h.remove()
        return np.stack(outs)


def tiny_llama(seed: int = 0, num_layers: int = 2, hidden: int = 32, mlp: int = 64, max_context: int = 256):
    """Randomly initialised Llama with a byte tokenizer, for tests and demos."""
    torch = _import_torch()
    from transformers import LlamaConfig, LlamaForCausalLM

    torch.manual_seed(seed)
    cfg = LlamaConfig(
        vocab_size=ByteTokenizer.vocab_size,
        hidden_size=hidden,
        intermediate_size=mlp,
        num_hidden_layers=num_layers,
        num_attention_heads=4,
        num_key_value_heads=2,
        max_position_embeddings=max_context,
        bos_token_id=1,
        eos_token_id=2,
        pad_token_id=0,
    )
    return HfGatedAdapter(LlamaForCausalLM(cfg), ByteTokenizer(), f"tiny-llama-s{seed}")
