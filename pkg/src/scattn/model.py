"""The caption model: encoder stack, attentive suffix, LSTM, output head.

Per decoding step the attentive encoder suffix is re-run (its weights
depend on the previous hidden state), while conv layers below the first
attentive layer are computed once per image and shared across steps as a
common graph prefix. Checkpoints are self-describing: the configuration
rides along as rank-0 ``meta.*`` entries and the vocabulary is stored next
to the checkpoint in ``<path>.vocab``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import attention as A
from . import encoder as E
from . import serialize as S
from . import tensor as T
from .attention import AttentionOrder, ModulationConfig
from .decoder import DecoderState, LSTMParams, OutputParams, embed, lstm_step, output_distribution
from .errors import ConfigError, FormatError
from .tensor import Tensor
from .vocab import END, PAD, START, Vocabulary

_ORDER_CODES = {"cs": 0, "sc": 1, "s": 2, "c": 3}
_ORDER_FROM_CODE = {v: k for k, v in _ORDER_CODES.items()}
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 24
    hidden_dim: int = 48
    visual_dim: int = 32
    mapping_dim: int = 24
    order: AttentionOrder = AttentionOrder.CHANNEL_FIRST
    attn_layers: int = 1
    rescale: bool = True
    encoder_mode: str = "tiny"  # "tiny" or "inject"
    input_shape: tuple = (16, 16, 3)

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must be >= 5, got {self.vocab_size}")
        for f in ("embed_dim", "hidden_dim", "visual_dim", "mapping_dim"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if self.attn_layers < 0:
            raise ConfigError("attn_layers must be >= 0")
        depth = self.encoder_config().depth
        max_attn = depth if depth else 1  # injection mode can attend the injected map
        if self.attn_layers > max_attn:
            raise ConfigError(
                f"attn_layers={self.attn_layers} exceeds the {max_attn} attendable layers"
            )

    def encoder_config(self):
        if self.encoder_mode == "inject":
            return E.EncoderConfig.injection()
        return E.EncoderConfig.tiny_default(self.input_shape[2])

    def attentive_layers(self):
        depth = self.encoder_config().depth
        if self.attn_layers == 0:
            return set()
        if depth == 0:
            return {0}
        return set(range(depth - self.attn_layers + 1, depth + 1))

    def layer_shapes(self):
        return E.output_shape(self.encoder_config(), self.input_shape)


class CaptionModel:
    def __init__(self, config, vocab, seed=0):
        if vocab.size != config.vocab_size:
            raise ConfigError(
                f"vocabulary size {vocab.size} != configured {config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.enc_config = config.encoder_config()
        self.attentive = sorted(config.attentive_layers())
        self.mod_cfg = ModulationConfig(rescale=config.rescale)
        shapes = config.layer_shapes()
        rng = np.random.default_rng(seed)

        def u(*shape):
            return Tensor(rng.uniform(-0.08, 0.08, size=shape), requires_grad=True)

        self.embedding = u(config.vocab_size, config.embed_dim)
        self.embedding.data[PAD] = 0.0
        self.enc_weights = E.init_weights(self.enc_config, rng)
        self.attn_params = {
            layer: A.AttentionParams.init(rng, shapes[layer][2], config.hidden_dim,
                                          config.mapping_dim)
            for layer in self.attentive
        }
        final_c = shapes[-1][2]
        self.vec_w = u(config.visual_dim, final_c)
        self.vec_b = u(config.visual_dim)
        self.lstm = LSTMParams.init(rng, config.visual_dim + config.embed_dim,
                                    config.hidden_dim)
        self.out = OutputParams.init(rng, config.vocab_size, config.hidden_dim,
                                     config.embed_dim)

        # split the stack at the first attentive layer: everything below is
        # recomputed once per image, everything from there on once per step
        if self.attentive:
            first = self.attentive[0]
            split = max(first - 1, 0)
            self._prefix_cfg = E.EncoderConfig(layers=self.enc_config.layers[:split])
            self._suffix_cfg = E.EncoderConfig(layers=self.enc_config.layers[split:])
            self._suffix_weights_at = split
            self._suffix_attentive = {i - split for i in self.attentive}
            self._layer_offset = split
        else:
            self._prefix_cfg = self.enc_config
            self._suffix_cfg = None

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        named = {"emb.e": self.embedding, "vec.w": self.vec_w, "vec.b": self.vec_b}
        for i, w in enumerate(self.enc_weights, start=1):
            named[f"enc.l{i}.w"] = w["w"]
            named[f"enc.l{i}.b"] = w["b"]
        for layer, p in self.attn_params.items():
            named.update(p.named(f"attn.l{layer}"))
        named.update(self.lstm.named("lstm"))
        named.update(self.out.named("out"))
        return named

    # -- forward ------------------------------------------------------------

    def prepare(self, image):
        """Per-image graph prefix (the map feeding the attentive suffix)."""
        if image.shape != self.config.input_shape:
            raise ConfigError(
                f"input shape {image.shape} != configured {self.config.input_shape}"
            )
        weights = self.enc_weights[:len(self._prefix_cfg.layers)]
        return E.encode(image, self._prefix_cfg, weights)[-1]

    def step(self, state, y_prev, base, drop_mask=None):
        """One decode step from a prepared base map.

        Returns (word distribution, next state, attention weights).
        """
        if self._suffix_cfg is not None:
            weights = self.enc_weights[self._suffix_weights_at:]
            per_layer = [(self.attn_params[l], self.config.order) for l in self.attentive]
            x_map, attn = A.multi_layer_pass(
                base, self._suffix_cfg, weights, state.h, per_layer,
                self._suffix_attentive, self.mod_cfg,
            )
            attn = [replace(w, layer=w.layer + self._layer_offset) for w in attn]
        else:
            x_map, attn = base, []
        pooled = T.mean_pool_spatial(x_map)
        visual = T.add(T.matmul(self.vec_w, pooled), self.vec_b)
        x_t = T.concat([visual, embed(y_prev, self.embedding)])
        new_state = lstm_step(state, x_t, self.lstm)
        h_out = T.mul(new_state.h, drop_mask) if drop_mask is not None else new_state.h
        p = output_distribution(h_out, y_prev, self.out, self.embedding)
        return p, new_state, attn

    def teacher_forced(self, image, caption_ids, drop_masks=None):
        """Feed ground-truth previous tokens; returns (p_t list, target list)."""
        base = self.prepare(image)
        state = DecoderState.zero(self.config.hidden_dim)
        inputs = [START] + list(caption_ids)
        targets = list(caption_ids) + [END]
        ps = []
        for t, y_prev in enumerate(inputs):
            mask = drop_masks[t] if drop_masks is not None else None
            p, state, _ = self.step(state, y_prev, base, drop_mask=mask)
            ps.append(p)
        return ps, targets

    # -- decoding protocol (see decoder.decode_caption) ----------------------

    def begin(self, image):
        with T.no_grad():
            base = self.prepare(image)
        return (DecoderState.zero(self.config.hidden_dim), base)

    def step_logprobs(self, search_state, y_prev, image):
        dec, base = search_state
        with T.no_grad():
            p, new_dec, attn = self.step(dec, y_prev, base)
            logp = np.log(p.data)
        return logp, (new_dec, base), attn

    # -- persistence ----------------------------------------------------------

    def _meta(self):
        cfg = self.config
        return {
            "meta.version": np.asarray(float(CHECKPOINT_VERSION)),
            "meta.vocab_size": np.asarray(float(cfg.vocab_size)),
            "meta.embed_dim": np.asarray(float(cfg.embed_dim)),
            "meta.hidden_dim": np.asarray(float(cfg.hidden_dim)),
            "meta.visual_dim": np.asarray(float(cfg.visual_dim)),
            "meta.mapping_dim": np.asarray(float(cfg.mapping_dim)),
            "meta.order": np.asarray(float(_ORDER_CODES[cfg.order.value])),
            "meta.attn_layers": np.asarray(float(cfg.attn_layers)),
            "meta.rescale": np.asarray(1.0 if cfg.rescale else 0.0),
            "meta.encoder_mode": np.asarray(0.0 if cfg.encoder_mode == "tiny" else 1.0),
            "meta.input_w": np.asarray(float(cfg.input_shape[0])),
            "meta.input_h": np.asarray(float(cfg.input_shape[1])),
            "meta.input_c": np.asarray(float(cfg.input_shape[2])),
        }

    def state_entries(self):
        entries = {name: t.data for name, t in self.parameters().items()}
        entries.update(self._meta())
        return entries

    def save(self, path):
        S.write_checkpoint(path, self.state_entries())
        self.vocab.save(str(path) + ".vocab")

    @staticmethod
    def config_from_entries(entries):
        def geti(name):
            if name not in entries:
                raise FormatError(f"checkpoint is missing {name}")
            return int(entries[name])

        if geti("meta.version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {geti('meta.version')}")
        return ModelConfig(
            vocab_size=geti("meta.vocab_size"),
            embed_dim=geti("meta.embed_dim"),
            hidden_dim=geti("meta.hidden_dim"),
            visual_dim=geti("meta.visual_dim"),
            mapping_dim=geti("meta.mapping_dim"),
            order=AttentionOrder.from_string(_ORDER_FROM_CODE[geti("meta.order")]),
            attn_layers=geti("meta.attn_layers"),
            rescale=bool(geti("meta.rescale")),
            encoder_mode="tiny" if geti("meta.encoder_mode") == 0 else "inject",
            input_shape=(geti("meta.input_w"), geti("meta.input_h"), geti("meta.input_c")),
        )

    @staticmethod
    def load(path):
        entries = S.read_checkpoint(path)
        config = CaptionModel.config_from_entries(entries)
        vocab = Vocabulary.load(str(path) + ".vocab")
        model = CaptionModel(config, vocab, seed=0)
        missing = model.load_matching(entries)
        if missing:
            raise FormatError(f"checkpoint is missing parameters: {sorted(missing)}")
        return model

    def load_matching(self, entries):
        """Copy every same-named, same-shaped entry into this model.

        Returns the parameter names NOT found in the entries (left at their
        fresh initialization): the warm-start contract.
        """
        fresh = []
        for name, tensor in self.parameters().items():
            arr = entries.get(name)
            if arr is None or arr.shape != tensor.data.shape:
                fresh.append(name)
                continue
            tensor.data = arr.copy()
        return fresh
