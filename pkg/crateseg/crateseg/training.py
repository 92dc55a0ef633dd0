import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .data import Sample
from .exceptions import ConfigurationError, NumericalError
from .model import CrateModel

logger = logging.getLogger(__name__)

OPTIMIZERS = ("lion", "sgd")
SCHEDULES = ("cosine", "constant")
DIVERGENCE_LOSS = 1e4
NO_DECAY_KEYS = ("ln1", "ln2", "class_token", "positional_encoding")


@dataclass
class OptimizerConfig:
    """
    Optimizer and schedule for supervised training.

    ``momentum`` is used by SGD, ``betas`` by Lion. The learning rate rises
    linearly over ``warmup_epochs`` and then follows ``schedule``: a cosine
    decay to zero at the last step, or a constant. The defaults are sized for
    the synthetic dataset; ``large_scale_defaults`` gives ImageNet-scale values.
    """
    kind: str = "lion"
    lr: float = 5e-4
    weight_decay: float = 0.05
    momentum: float = 0.9
    betas: Tuple[float, float] = (0.9, 0.99)
    batch_size: int = 64
    epochs: int = 20
    warmup_epochs: int = 2
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigurationError(f"Optimizer must be one of {OPTIMIZERS}, got '{self.kind}'")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigurationError(f"Learning rate must be finite and nonnegative, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"Weight decay must be nonnegative, got {self.weight_decay}")
        if not 0 <= self.momentum < 1 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"Momentum and betas must lie in [0, 1), got {self.momentum}, {self.betas}")
        if self.batch_size < 1:
            raise ConfigurationError(f"Batch size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"Epoch count must be positive, got {self.epochs}")
        if self.warmup_epochs < 0:
            raise ConfigurationError(f"Warmup epoch count must be nonnegative, got {self.warmup_epochs}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"Schedule must be one of {SCHEDULES}, got '{self.schedule}'")

    @classmethod
    def large_scale_defaults(cls) -> "OptimizerConfig":
        """ Lion settings used for large-scale pre-training (kept for reference) """
        return cls(kind="lion", lr=9.6e-5, weight_decay=0.05, batch_size=4096, epochs=90, warmup_epochs=5)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "OptimizerConfig":
        return cls(**data)


class Lion(torch.optim.Optimizer):
    """
    Sign-momentum optimizer with decoupled weight decay:

        p <- p (1 - lr wd) - lr sign(beta1 m + (1 - beta1) g)
        m <- beta2 m + (1 - beta2) g
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.99), weight_decay=0.0):
        defaults = dict(lr=lr, betas=betas, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "exp_avg" not in state:
                    state["exp_avg"] = torch.zeros_like(p)
                exp_avg = state["exp_avg"]

                p.mul_(1 - group["lr"] * group["weight_decay"])
                update = exp_avg.mul(beta1).add(p.grad, alpha=1 - beta1)
                p.add_(torch.sign(update), alpha=-group["lr"])
                exp_avg.mul_(beta2).add_(p.grad, alpha=1 - beta2)
        return loss


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    test_accuracy: Optional[float] = None

    def to_dict(self) -> Dict:
        data = {"epoch": self.epoch, "loss": self.loss, "acc": self.accuracy}
        if self.test_accuracy is not None:
            data["test_acc"] = self.test_accuracy
        return data


@dataclass
class TrainState:
    """
    A model together with its optimizer moments, counters and history.
    The optimizer and its learning-rate schedule are created lazily on the
    first call to ``train``.
    """
    model: CrateModel
    optimizer: Optional[torch.optim.Optimizer] = None
    scheduler: Optional[torch.optim.lr_scheduler.LambdaLR] = None
    epoch: int = 0
    step: int = 0
    history: List[EpochRecord] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(record) for record in self.history])


def decay_groups(model: CrateModel, weight_decay: float) -> List[Dict]:
    """ Split parameters into decayed and non-decayed groups; LayerNorm, class token and positional encoding are not decayed """
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        (no_decay if any(key in name for key in NO_DECAY_KEYS) else decay).append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_optimizer(model: CrateModel, opt: OptimizerConfig) -> torch.optim.Optimizer:
    groups = decay_groups(model, opt.weight_decay)
    if opt.kind == "lion":
        return Lion(groups, lr=opt.lr, betas=opt.betas)
    return torch.optim.SGD(groups, lr=opt.lr, momentum=opt.momentum)


def lr_factor(step: int, warmup_steps: int, total_steps: int, schedule: str = "cosine") -> float:
    """ Multiplier of the base learning rate at optimizer step ``step`` (0-based) """
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    if schedule == "constant":
        return 1.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def build_scheduler(
    optimizer: torch.optim.Optimizer, opt: OptimizerConfig, steps_per_epoch: int
) -> torch.optim.lr_scheduler.LambdaLR:
    warmup_steps = opt.warmup_epochs * steps_per_epoch
    total_steps = opt.epochs * steps_per_epoch
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: lr_factor(step, warmup_steps, total_steps, opt.schedule)
    )


def stack_samples(samples: Sequence[Sample], dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    if len(samples) == 0:
        raise ConfigurationError("Dataset is empty")
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    labels = torch.as_tensor([s.label for s in samples], dtype=torch.long)
    return images, labels


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """
    Mean softmax cross-entropy. A single logit vector with an integer label is
    accepted as a batch of one.
    """
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 1:
        logits, labels = logits.unsqueeze(0), labels.reshape(1)
    return F.cross_entropy(logits, labels)


def _non_finite_groups(model: CrateModel) -> List[str]:
    return [name for name, p in model.named_parameters() if not torch.isfinite(p).all()]


def compute_loss(model: CrateModel, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    loss = cross_entropy(model(images).logits, labels)
    if not torch.isfinite(loss):
        groups = _non_finite_groups(model)
        where = ", ".join(groups) if groups else "logits (all parameters are finite)"
        raise NumericalError(f"Loss is not finite ({loss.item()}); offending parameter group: {where}")
    return loss


def backward(model: CrateModel, images: torch.Tensor, labels: torch.Tensor) -> Dict[str, torch.Tensor]:
    """
    Gradients of the mean cross-entropy over the batch for every named parameter.
    Parameters that do not influence the loss get a zero gradient.
    """
    if len(labels) == 0:
        raise ConfigurationError("Batch is empty")
    model.zero_grad(set_to_none=True)
    loss = compute_loss(model, images, labels)
    loss.backward()
    gradients = {}
    for name, p in model.named_parameters():
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(grad).all():
            raise NumericalError(f"Gradient of parameter group {name} is not finite")
        gradients[name] = grad
    return gradients


def _loss_and_kinks(model: CrateModel, images: torch.Tensor, labels: torch.Tensor) -> Tuple[float, torch.Tensor]:
    """ Loss and the zero pattern of every layer output, which marks the side of each ReLU kink """
    output = model(images, want_trace=True)
    loss = cross_entropy(output.logits, labels).item()
    pattern = torch.cat([(Z == 0).reshape(-1) for Z in output.trace.inputs[1:]]) if model.layers else torch.empty(0)
    return loss, pattern


def _central_difference(
    model: CrateModel,
    flat: torch.Tensor,
    index: int,
    images: torch.Tensor,
    labels: torch.Tensor,
    step: float,
    base_pattern: torch.Tensor,
    retries: int = 3,
) -> float:
    original = flat[index].item()
    for _ in range(retries + 1):
        flat[index] = original + step
        plus, plus_pattern = _loss_and_kinks(model, images, labels)
        flat[index] = original - step
        minus, minus_pattern = _loss_and_kinks(model, images, labels)
        flat[index] = original
        difference = (plus - minus) / (2 * step)
        if torch.equal(plus_pattern, base_pattern) and torch.equal(minus_pattern, base_pattern):
            break
        # a perturbation crossed a kink; shrink the step
        step /= 10
    return difference


def finite_difference_check(
    model: CrateModel,
    images: torch.Tensor,
    labels: torch.Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Compare ``backward`` with central finite differences for every parameter group.

    Parameters
    ----------
    max_entries : int, optional
        Check at most this many randomly chosen entries per group; all entries by default.

    Returns
    -------
    pd.DataFrame
        One row per parameter group with columns group, entries, rel_error, passed.
        rel_error = ||g - fd|| / max(||g||, ||fd||) over the checked entries; a group
        whose gradients are both below 1e-8 passes with rel_error 0.
        Entries whose perturbation flips a ReLU kink are retried with a smaller step.
    """
    if model.head.weight.dtype != torch.float64:
        logger.warning("Finite-difference check on a %s model; use float64 for meaningful errors", model.head.weight.dtype)
    gradients = backward(model, images, labels)
    generator = torch.Generator().manual_seed(seed)
    rows = []
    with torch.no_grad():
        _, base_pattern = _loss_and_kinks(model, images, labels)
        for name, param in model.named_parameters():
            flat = param.view(-1)
            entries = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                entries = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            analytic = gradients[name].view(-1)[entries].double()
            numeric = torch.empty_like(analytic)
            for position, index in enumerate(entries.tolist()):
                numeric[position] = _central_difference(model, flat, index, images, labels, step, base_pattern)
            scale = max(analytic.norm().item(), numeric.norm().item())
            rel_error = 0.0 if scale < 1e-8 else (analytic - numeric).norm().item() / scale
            rows.append({
                "group": name,
                "entries": len(entries),
                "rel_error": rel_error,
                "passed": rel_error < tolerance,
            })
            logger.debug("Gradient check %s: rel_error %.3e", name, rel_error)
    return pd.DataFrame(rows, columns=["group", "entries", "rel_error", "passed"])


@torch.no_grad()
def predict(model: CrateModel, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """ Top-1 predictions; argmax returns the lowest class index among tied logits """
    predictions = [
        model(images[start:start + batch_size]).logits.argmax(dim=-1)
        for start in range(0, len(images), batch_size)
    ]
    return torch.cat(predictions) if predictions else torch.empty(0, dtype=torch.long)


def evaluate_accuracy(model: CrateModel, samples: Sequence[Sample], batch_size: int = 256) -> float:
    if len(samples) == 0:
        return float("nan")
    images, labels = stack_samples(samples, model.head.weight.dtype)
    return float((predict(model, images, batch_size) == labels).double().mean())


def train(
    state: TrainState,
    samples: Sequence[Sample],
    opt: OptimizerConfig,
    test_samples: Optional[Sequence[Sample]] = None,
    progress: bool = True,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainState:
    """
    Minibatch training on the mean cross-entropy.

    The shuffle order of epoch e is drawn from a generator seeded with
    ``opt.seed + e``, so runs are reproducible. The schedule spans
    ``opt.epochs`` epochs of the given samples and is stepped after every
    batch. A batch loss above 1e4 aborts with NumericalError.
    """
    model = state.model
    images, labels = stack_samples(samples, model.head.weight.dtype)
    if state.optimizer is None:
        state.optimizer = build_optimizer(model, opt)
    optimizer = state.optimizer
    count = len(labels)
    if state.scheduler is None:
        state.scheduler = build_scheduler(optimizer, opt, math.ceil(count / opt.batch_size))

    epochs = tqdm(range(opt.epochs), desc="Training", disable=not progress)
    for _ in epochs:
        model.train()
        generator = torch.Generator().manual_seed(opt.seed + state.epoch)
        order = torch.randperm(count, generator=generator)
        total_loss, correct = 0.0, 0
        for start in range(0, count, opt.batch_size):
            batch = order[start:start + opt.batch_size]
            optimizer.zero_grad(set_to_none=True)
            logits = model(images[batch]).logits
            loss = cross_entropy(logits, labels[batch])
            if not torch.isfinite(loss) or loss.item() > DIVERGENCE_LOSS:
                raise NumericalError(
                    f"Training diverged at epoch {state.epoch + 1}, step {state.step}: "
                    f"batch loss {loss.item():.4g} (lr {optimizer.param_groups[0]['lr']:.3g}, optimizer {opt.kind})"
                )
            loss.backward()
            optimizer.step()
            state.scheduler.step()
            state.step += 1
            total_loss += loss.item() * len(batch)
            correct += int((logits.argmax(dim=-1) == labels[batch]).sum())
        model.eval()
        state.epoch += 1
        record = EpochRecord(
            epoch=state.epoch,
            loss=total_loss / count,
            accuracy=correct / count,
            test_accuracy=evaluate_accuracy(model, test_samples) if test_samples else None,
        )
        state.history.append(record)
        epochs.set_postfix(loss=f"{record.loss:.4f}", acc=f"{record.accuracy:.3f}")
        logger.info("Epoch %d: loss %.4f, accuracy %.3f", record.epoch, record.loss, record.accuracy)
        if on_epoch is not None:
            on_epoch(record)
    return state
