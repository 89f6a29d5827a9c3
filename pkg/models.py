"""Recurrent/stacked autoencoders, soft attention, backbones and the classifier head.

All sequence models consume x as [batch, 8, 310]. Window-level models (SAE,
DNN, CNN) fold the 8 windows into the batch axis and average the 8 window
logits into one segment prediction.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import CheckpointError, ConfigError, ShapeError
from layers import (
    BatchNorm1d,
    Conv1d,
    Dropout,
    Flatten,
    LeakyReLU,
    Linear,
    MaxPool1d,
    Module,
    Parameter,
    ReLU,
    Sequential,
    uniform_init,
)
from sigproc import N_FEATURES, N_STEPS

logger = logging.getLogger(__name__)

N_CLASSES = 3
CHECKPOINT_FORMAT = "eegssl-checkpoint"
CHECKPOINT_VERSION = 1


# ------- recurrent building blocks -------
class LstmLayer(Module):
    """Canonical LSTM (no peepholes); gate order input, forget, cell, output."""

    def __init__(
        self,
        input_size: int,
        rng: np.random.Generator,
        hidden_size: int = 256,
        steps: int = N_STEPS,
        forget_bias: float = 1.0,
    ):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.steps = steps
        self.w_input = uniform_init(rng, (input_size, 4 * hidden_size), input_size)
        self.w_hidden = uniform_init(rng, (hidden_size, 4 * hidden_size), hidden_size)
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size : 2 * hidden_size] = forget_bias
        self.bias = Parameter(bias)

    def forward(self, inputs: Sequence[Tensor]) -> List[Tensor]:
        return lstm_forward(self, inputs)


def lstm_forward(layer: LstmLayer, inputs: Sequence[Tensor]) -> List[Tensor]:
    if len(inputs) != layer.steps:
        raise ShapeError(f"LSTM expects {layer.steps} steps, got {len(inputs)}")
    size = layer.hidden_size
    batch = inputs[0].shape[0]
    h = Tensor(np.zeros((batch, size)))
    c = Tensor(np.zeros((batch, size)))
    outputs = []
    for x in inputs:
        z = x @ layer.w_input + h @ layer.w_hidden + layer.bias
        i = ad.sigmoid(z[:, :size])
        f = ad.sigmoid(z[:, size : 2 * size])
        g = ad.tanh(z[:, 2 * size : 3 * size])
        o = ad.sigmoid(z[:, 3 * size :])
        c = f * c + i * g
        h = o * ad.tanh(c)
        outputs.append(h)
    return outputs


class SoftAttention(Module):
    """u_t = tanh(W h_t + b); score_t = u_t . context; alpha = softmax(score)."""

    def __init__(self, hidden_size: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (hidden_size, hidden_size), hidden_size)
        self.bias = Parameter(np.zeros(hidden_size))
        self.context = uniform_init(rng, (hidden_size, 1), hidden_size)

    def forward(self, hidden: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
        return attention_forward(self, hidden)


def attention_forward(att: SoftAttention, hidden: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
    """Returns the context vector v [batch, hidden] and weights alpha [batch, steps]."""
    if not hidden or any(h.shape != hidden[0].shape for h in hidden):
        raise ShapeError("attention expects a non-empty list of equally shaped hidden states")
    scores = ad.concat([ad.tanh(h @ att.weight + att.bias) @ att.context for h in hidden], axis=1)
    alpha = ad.softmax(scores, axis=1)
    v = alpha[:, 0:1] * hidden[0]
    for t in range(1, len(hidden)):
        v = v + alpha[:, t : t + 1] * hidden[t]
    return v, alpha


def _check_sequence(x: Tensor, steps: int, n_features: int) -> None:
    if x.ndim != 3 or x.shape[1] != steps or x.shape[2] != n_features:
        raise ShapeError(f"expected input [batch, {steps}, {n_features}], got {x.shape}")


# ------- autoencoders -------
class AttRae(Module):
    window_level = False

    def __init__(
        self,
        rng: np.random.Generator,
        n_features: int = N_FEATURES,
        hidden_size: int = 256,
        steps: int = N_STEPS,
        attention: bool = True,
    ):
        self.n_features = n_features
        self.steps = steps
        self.latent_size = hidden_size
        self.enc1 = LstmLayer(n_features, rng, hidden_size, steps)
        self.enc2 = LstmLayer(hidden_size, rng, hidden_size, steps)
        self.attention = SoftAttention(hidden_size, rng) if attention else None
        self.dec1 = LstmLayer(hidden_size, rng, hidden_size, steps)
        self.dec2 = LstmLayer(hidden_size, rng, hidden_size, steps)
        # LSTM outputs are hidden_size wide; x-hat needs n_features per step
        self.projection = Linear(hidden_size, n_features, rng)

    def encode(self, x: Tensor) -> Tensor:
        _check_sequence(x, self.steps, self.n_features)
        h1 = self.enc1([x[:, t, :] for t in range(self.steps)])
        h2 = self.enc2(h1)
        if self.attention is None:
            return h2[-1]
        v, _ = self.attention(h2)
        return v

    def decode(self, v: Tensor) -> Tensor:
        d1 = self.dec1([v] * self.steps)
        d2 = self.dec2(d1)
        return ad.stack([self.projection(h) for h in d2], axis=1)

    def pool_logits(self, logits: Tensor) -> Tensor:
        return logits

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        v = self.encode(x)
        return self.decode(v), v


class Rae(AttRae):
    """AttRae with the last encoder step standing in for the attention context."""

    def __init__(self, rng: np.random.Generator, n_features: int = N_FEATURES, hidden_size: int = 256, steps: int = N_STEPS):
        super().__init__(rng, n_features, hidden_size, steps, attention=False)


def att_rae_forward(model: AttRae, x: Tensor) -> Tuple[Tensor, Tensor]:
    return model(x)


class Sae(Module):
    """Per-window stacked autoencoder F -> 256 -> 64 -> 256 -> F."""

    window_level = True

    def __init__(self, rng: np.random.Generator, n_features: int = N_FEATURES, steps: int = N_STEPS, hidden: int = 256, latent: int = 64):
        self.n_features = n_features
        self.steps = steps
        self.latent_size = latent
        self.encoder = Sequential(Linear(n_features, hidden, rng), ReLU(), Linear(hidden, latent, rng), ReLU())
        self.decoder = Sequential(Linear(latent, hidden, rng), ReLU(), Linear(hidden, n_features, rng))

    def encode(self, x: Tensor) -> Tensor:
        _check_sequence(x, self.steps, self.n_features)
        return self.encoder(x.reshape(-1, self.n_features))

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z).reshape(-1, self.steps, self.n_features)

    def pool_logits(self, logits: Tensor) -> Tensor:
        return logits.reshape(-1, self.steps, logits.shape[-1]).mean(axis=1)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        z = self.encode(x)
        return self.decode(z), z


# ------- classification -------
class Classifier(Module):
    """FC(in -> 64) -> ReLU -> Dropout(0.5) -> FC(64 -> 3)."""

    def __init__(self, in_features: int, rng: np.random.Generator, hidden: int = 64, n_classes: int = N_CLASSES, dropout: float = 0.5):
        self.in_features = in_features
        self.fc1 = Linear(in_features, hidden, rng)
        self.act = ReLU()
        self.dropout = Dropout(dropout, rng)
        self.fc2 = Linear(hidden, n_classes, rng)

    def forward(self, latent: Tensor) -> Tensor:
        return self.fc2(self.dropout(self.act(self.fc1(latent))))


def classify(head: Classifier, latent: Tensor) -> Tensor:
    if latent.ndim != 2 or latent.shape[1] != head.in_features:
        raise ShapeError(f"classifier expects [batch, {head.in_features}], got {latent.shape}")
    return head(latent)


class JointModel(Module):
    """Autoencoder plus a classifier fed from its latent representation."""

    def __init__(self, autoencoder: Union[AttRae, Sae], head: Classifier):
        self.autoencoder = autoencoder
        self.head = head

    def encode(self, x: Tensor) -> Tensor:
        return self.autoencoder.encode(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.autoencoder.decode(z)

    def classify(self, z: Tensor) -> Tensor:
        return self.autoencoder.pool_logits(classify(self.head, z))

    def encoder_parameters(self) -> List[Parameter]:
        """Parameters on the x -> logits path (decoder excluded)."""
        decoder_ids = {id(p) for p in self._decoder_modules_parameters()}
        return [p for p in self.parameters() if id(p) not in decoder_ids]

    def _decoder_modules_parameters(self) -> List[Parameter]:
        ae = self.autoencoder
        if isinstance(ae, Sae):
            return ae.decoder.parameters()
        return ae.dec1.parameters() + ae.dec2.parameters() + ae.projection.parameters()

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.encode(x))


class ChannelView(Module):
    """[N, F] -> [N, 1, F] for the convolutional stack."""

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], 1, x.shape[1])


class WindowModel(Module):
    """Per-window feature extractor + Classifier, logits averaged over windows."""

    def __init__(self, features: Module, head: Classifier, n_features: int = N_FEATURES, steps: int = N_STEPS):
        self.features = features
        self.head = head
        self.n_features = n_features
        self.steps = steps

    def forward(self, x: Tensor) -> Tensor:
        _check_sequence(x, self.steps, self.n_features)
        logits = classify(self.head, self.features(x.reshape(-1, self.n_features)))
        return logits.reshape(-1, self.steps, logits.shape[-1]).mean(axis=1)


class DnnBackbone(WindowModel):
    def __init__(self, rng: np.random.Generator, n_features: int = N_FEATURES, steps: int = N_STEPS):
        features = Sequential(Linear(n_features, 256, rng), ReLU(), Linear(256, 64, rng), ReLU())
        super().__init__(features, Classifier(64, rng), n_features, steps)


def cnn_flatten_width(n_features: int) -> int:
    after_conv1 = n_features - 2
    after_pool = after_conv1 // 2
    return 10 * (after_pool - 2)


class CnnBackbone(WindowModel):
    def __init__(self, rng: np.random.Generator, n_features: int = N_FEATURES, steps: int = N_STEPS):
        features = Sequential(
            ChannelView(),
            Conv1d(1, 5, rng), BatchNorm1d(5), LeakyReLU(0.3), MaxPool1d(2, 2),
            Conv1d(5, 10, rng), BatchNorm1d(10), LeakyReLU(0.3),
            Flatten(),
        )
        super().__init__(features, Classifier(cnn_flatten_width(n_features), rng), n_features, steps)


# ------- factory and checkpoints -------
def build_model(
    method: str,
    backbone: str,
    rng: np.random.Generator,
    hidden_size: int = 256,
    n_features: int = N_FEATURES,
    steps: int = N_STEPS,
) -> Module:
    if method in ("att_rae", "rae"):
        cls = AttRae if method == "att_rae" else Rae
        autoencoder = cls(rng, n_features=n_features, hidden_size=hidden_size, steps=steps)
        return JointModel(autoencoder, Classifier(hidden_size, rng))
    if method in ("sae", "pretrain_sae"):
        return JointModel(Sae(rng, n_features=n_features, steps=steps), Classifier(64, rng))
    if backbone == "dnn":
        return DnnBackbone(rng, n_features, steps)
    if backbone == "cnn":
        return CnnBackbone(rng, n_features, steps)
    raise ConfigError(f"no model for method {method!r} with backbone {backbone!r}")


def parameter_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def save_checkpoint(model: Module, path: Union[str, Path]) -> None:
    """npz archive: one `param:<name>` array per parameter/buffer plus format header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param:{name}": value for name, value in model.state_dict().items()}
    with path.open("wb") as handle:
        np.savez(
            handle,
            __format__=np.array(CHECKPOINT_FORMAT),
            __version__=np.array(CHECKPOINT_VERSION),
            **arrays,
        )


def load_checkpoint(model: Module, path: Union[str, Path]) -> Module:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as archive:
        if "__format__" not in archive or str(archive["__format__"]) != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a model checkpoint")
        version = int(archive["__version__"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        state = {key[len("param:"):]: archive[key] for key in archive.files if key.startswith("param:")}
    model.load_state_dict(state)
    return model
