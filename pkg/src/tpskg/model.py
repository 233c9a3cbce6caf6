"""Encoder plus head, switchable between the four ablation modes."""
from __future__ import annotations

import numpy as np

from .knowledge import DEFAULT_MU, ForwardArtifacts, init_knowledge_params, init_linear_head, kg_forward, linear_forward
from .suppression import suppressed_step
from .tensor import Tensor, no_grad
from .vit import ModelConfig, Params, forward, init_encoder_params

# mode -> (peak suppression, knowledge guidance)
MODES = {
    "full": (True, True),
    "no_ps": (False, True),
    "no_kg": (True, False),
    "baseline": (False, False),
}


class TPSKGModel:
    def __init__(self, cfg: ModelConfig, mode: str = "full", dtype=np.float32, top_k: int = 1,
                 encoder: Params | None = None, head: Params | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
        self.cfg = cfg
        self.mode = mode
        self.use_ps, self.use_kg = MODES[mode]
        self.top_k = top_k
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.encoder = encoder if encoder is not None else init_encoder_params(cfg, rng, self.dtype)
        if head is None:
            make = init_knowledge_params if self.use_kg else init_linear_head
            head = make(cfg.embed_dim, cfg.classes, rng, self.dtype)
        self.head = head

    @property
    def params(self) -> Params:
        p = Params(self.encoder)
        p.update(self.head)
        return p

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.head.zero_grad()

    def head_forward(self, y: Tensor, labels=None, mu: float = DEFAULT_MU) -> ForwardArtifacts:
        if self.use_kg:
            return kg_forward(y, self.head, labels, mu)
        return linear_forward(y, self.head, labels)

    def train_forward(self, images, labels, mu: float = DEFAULT_MU):
        """Training forward; call inside a Tape. Returns (artifacts, masks or None)."""
        images = np.asarray(images)
        masks = None
        if self.use_ps:
            y, masks, _ = suppressed_step(images, self.encoder, self.cfg, training=True, top_k=self.top_k)
        else:
            y, _ = forward(images, self.encoder, self.cfg)
        return self.head_forward(y, labels, mu), masks

    def infer(self, images) -> ForwardArtifacts:
        """Inference forward: no suppression, no tape recording."""
        with no_grad():
            y, _ = forward(np.asarray(images), self.encoder, self.cfg)
            return self.head_forward(y)

    def predict(self, images, batch: int = 64) -> np.ndarray:
        images = np.asarray(images)
        out = [np.argmax(self.infer(images[i:i + batch]).u_logits.data, axis=-1)
               for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def representations(self, images, batch: int = 64) -> np.ndarray:
        images = np.asarray(images)
        with no_grad():
            ys = [forward(images[i:i + batch], self.encoder, self.cfg)[0].data
                  for i in range(0, len(images), batch)]
        return np.concatenate(ys)

    def knowledge_predict(self, images, batch: int = 64) -> np.ndarray:
        """argmax_g S(y, k^g) for every image."""
        if not self.use_kg:
            raise ValueError(f"mode {self.mode!r} has no knowledge embeddings")
        y = self.representations(images, batch)
        return np.argmax(y @ self.head["knowledge"].data.T, axis=-1)
