"""
Training recipes: two-pixel single and multiple output dimension models,
grayscale and colour patch models, and the code-to-patch decoder.

Every recipe is a pure function of its RecipeConfig (seed included) and the
corpus it reads, so the same configuration yields bit-identical weights.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from utils.calculations import decoder_table
from utils.data_processing import SamplerConfig, load_corpus, natural_pixel_pairs, random_patches, sample_patches
from utils.errors import NumericError, ValidationError, raise_if_problems
from utils.losses import e_miod, e_ood, loss_config_from_dict, repel, squared_error
from utils.mlp import (
    MlpModel,
    backward,
    forward,
    init,
    make_optimizer,
    make_rng,
    optimizer_step,
    parse_model_spec,
)
from utils.storage import load_weights, save_weights, weights_hash

logger = logging.getLogger(__name__)

RECIPES = ("two_pixel_ood", "two_pixel_miod", "patch_gray", "patch_color", "decoder")
RECIPE_LOSSES = {
    "two_pixel_ood": "ood",
    "two_pixel_miod": "miod",
    "patch_gray": "repel",
    "patch_color": "repel",
    "decoder": "mse",
}

OPTIMIZER_DEFAULTS = {"kind": "adam", "lr": 1e-3, "weight_decay": 0.0, "beta1": 0.9,
                      "beta2": 0.999, "eps": 1e-8, "schedule": []}
DATA_DEFAULTS = {"corpus": None, "pairs": 10_000_000, "batch_size": 10_000, "std": 0.2, "correlation": 0.9}
SAMPLER_DEFAULTS = {"batch_images": 1000, "patches_per_image": 1000, "minibatch_size": 500,
                    "flip_probability": 0.0, "sequential_minibatches": False, "batches": 1}
DECODER_DEFAULTS = {"encoder_weights": None, "patches": 100_000, "batch_size": 128}


@dataclass
class RecipeConfig:
    recipe: str
    model: Dict
    loss: Dict
    seed: int = 0
    epochs: int = 1
    scale_factor: float = 1.0
    n_models: int = 1
    optimizer: Dict = field(default_factory=lambda: dict(OPTIMIZER_DEFAULTS))
    data: Dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    sampler: Dict = field(default_factory=lambda: dict(SAMPLER_DEFAULTS))
    patch_size: int = 4
    channels: int = 1
    decoder: Dict = field(default_factory=lambda: dict(DECODER_DEFAULTS))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(eq=False)
class TrainReport:
    recipe: str
    epoch_losses: List[float]
    epoch_lrs: List[float]
    wall_time: float
    weights_hash: str
    init_hash: str
    config: Dict
    weights_paths: List[str] = field(default_factory=list)
    models: List[MlpModel] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        return {
            "recipe": self.recipe,
            "epoch_losses": self.epoch_losses,
            "epoch_lrs": self.epoch_lrs,
            "wall_time": self.wall_time,
            "weights_hash": self.weights_hash,
            "init_hash": self.init_hash,
            "weights_paths": self.weights_paths,
            "config": self.config,
        }


def validate_recipe(cfg: RecipeConfig) -> List[str]:
    """Recipe-level consistency between model, loss, data and recipe kind"""
    problems = []
    if cfg.recipe not in RECIPES:
        return [f"recipe must be one of {RECIPES}, got {cfg.recipe!r}"]
    if cfg.epochs < 0:
        problems.append("epochs must be non-negative")
    if not 0.0 < cfg.scale_factor <= 1.0:
        problems.append("scale_factor must lie in (0, 1]")
    if cfg.n_models < 1:
        problems.append("n_models must be at least 1")
    try:
        layers = parse_model_spec(cfg.model)
    except ValidationError as e:
        return problems + e.problems
    try:
        kind, _ = loss_config_from_dict(cfg.loss)
    except ValidationError as e:
        return problems + e.problems
    if kind != RECIPE_LOSSES[cfg.recipe]:
        problems.append(f"recipe {cfg.recipe} trains with the {RECIPE_LOSSES[cfg.recipe]} loss, not {kind}")
    problems.extend(_validate_schedule(cfg.optimizer.get("schedule", [])))

    head, in_dim = layers[-1].activation, layers[0].in_dim
    if cfg.recipe.startswith("two_pixel"):
        if in_dim != 2 or head != "softmax":
            problems.append("two-pixel models need 2 inputs and a softmax head")
        if cfg.recipe == "two_pixel_ood" and cfg.n_models != 1:
            problems.append("two_pixel_ood trains exactly one model")
        if cfg.recipe == "two_pixel_miod" and cfg.n_models < 2:
            problems.append("two_pixel_miod needs D >= 2 models")
    elif cfg.recipe.startswith("patch"):
        expected_channels = 1 if cfg.recipe == "patch_gray" else 3
        if cfg.channels != expected_channels:
            problems.append(f"{cfg.recipe} uses {expected_channels}-channel patches")
        if in_dim != cfg.patch_size * cfg.patch_size * cfg.channels:
            problems.append(f"model input {in_dim} does not match {cfg.patch_size}x{cfg.patch_size}x{cfg.channels} patches")
        if head != "sigmoid":
            problems.append("patch models need a sigmoid head")
        if cfg.sampler.get("minibatch_size", 2) < 2:
            problems.append("patch mini-batches need at least two samples")
    else:
        if layers[-1].out_dim != cfg.patch_size * cfg.patch_size * cfg.channels:
            problems.append("decoder output must match the patch size")
    return problems


def _validate_schedule(schedule) -> List[str]:
    if not isinstance(schedule, list):
        return ["optimizer.schedule must be a list"]
    problems = []
    for index, step in enumerate(schedule):
        if not isinstance(step, dict) or set(step) != {"epoch", "lr"}:
            problems.append(f"optimizer.schedule[{index}] must have exactly the keys epoch, lr")
        elif not isinstance(step["epoch"], int) or step["epoch"] < 0 or step["lr"] <= 0:
            problems.append(f"optimizer.schedule[{index}] needs a non-negative epoch and a positive lr")
    return problems


def scheduled_lr(optimizer: Dict, epoch: int) -> float:
    """Base lr, replaced by the last schedule step whose epoch has been reached"""
    lr = optimizer.get("lr", OPTIMIZER_DEFAULTS["lr"])
    for step in sorted(optimizer.get("schedule", []), key=lambda s: s["epoch"]):
        if step["epoch"] <= epoch:
            lr = step["lr"]
    return lr


def scaled(value: int, scale_factor: float, minimum: int = 1) -> int:
    return max(minimum, int(round(value * scale_factor)))


def model_seed(seed: int, index: int, n_models: int) -> int:
    """A single model uses the run seed itself; several models get derived seeds"""
    if n_models == 1:
        return seed
    return int(make_rng(seed, "model", index).integers(2**63))


def init_models(cfg: RecipeConfig) -> List[MlpModel]:
    return [init(cfg.model, model_seed(cfg.seed, index, cfg.n_models)) for index in range(cfg.n_models)]


def _optimizer_kwargs(optimizer: Dict) -> Dict:
    settings = {**OPTIMIZER_DEFAULTS, **optimizer}
    return {key: settings[key] for key in ("kind", "lr", "weight_decay", "beta1", "beta2", "eps")}


Batch = Tuple[np.ndarray, Optional[np.ndarray]]
LossFn = Callable[[List[np.ndarray], Optional[np.ndarray]], Tuple[float, List[np.ndarray]]]


def fit(models: List[MlpModel], cfg: RecipeConfig, epoch_batches: Callable[[int], Iterator[Batch]],
        loss_fn: LossFn, max_workers: Optional[int] = None) -> Tuple[List[MlpModel], List[float], List[float]]:
    """
    Run `cfg.epochs` epochs of synchronous mini-batch training over `models`.

    Every model sees the same input batch; `loss_fn` maps the list of model
    outputs (and optional targets) to the loss and one output gradient per
    model. Forward and backward passes of different models run on a thread
    pool; each model keeps its own optimizer state.
    """
    models = list(models)
    optimizers = [make_optimizer(model.parameters(), **_optimizer_kwargs(cfg.optimizer)) for model in models]
    losses, lrs = [], []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for epoch in range(cfg.epochs):
            lr = scheduled_lr(cfg.optimizer, epoch)
            for state in optimizers:
                state.lr = lr
            total, steps = 0.0, 0
            for inputs, targets in epoch_batches(epoch):
                caches = [[] for _ in models]
                outputs = list(pool.map(lambda m, c: forward(m, inputs, c), models, caches))
                loss, output_grads = loss_fn(outputs, targets)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss {loss} at epoch {epoch} step {steps}")
                grads = list(pool.map(lambda m, g, c: backward(m, inputs, g, c), models, output_grads, caches))
                models = [
                    model.with_parameters(optimizer_step(state, model.parameters(), model_grads))
                    for model, state, model_grads in zip(models, optimizers, grads)
                ]
                total += loss
                steps += 1
            if steps == 0:
                raise ValidationError(f"epoch {epoch} produced no mini-batches")
            losses.append(total / steps)
            lrs.append(lr)
            logger.info("epoch %d: mean loss %.6f, lr %g", epoch, losses[-1], lr)
    return models, losses, lrs


def _shuffled_batches(inputs: np.ndarray, targets: Optional[np.ndarray], batch_size: int,
                      seed: int) -> Callable[[int], Iterator[Batch]]:
    """Per-epoch permutation into full mini-batches of min(batch_size, rows)"""
    size = min(batch_size, len(inputs))

    def epoch_batches(epoch: int) -> Iterator[Batch]:
        order = make_rng(seed, "epoch", epoch).permutation(len(inputs))
        for start in range(0, len(order) - size + 1, size):
            picked = order[start:start + size]
            yield inputs[picked], None if targets is None else targets[picked]

    return epoch_batches


def _finish(cfg: RecipeConfig, models: List[MlpModel], init_hash: str, losses: List[float],
            lrs: List[float], started: float, output_dir) -> TrainReport:
    paths = [str(p) for p in save_weights(models, output_dir)] if output_dir is not None else []
    return TrainReport(
        recipe=cfg.recipe,
        epoch_losses=losses,
        epoch_lrs=lrs,
        wall_time=time.perf_counter() - started,
        weights_hash=weights_hash(models),
        init_hash=init_hash,
        config=cfg.to_dict(),
        weights_paths=paths,
        models=models,
    )


def _load_required_corpus(cfg: RecipeConfig):
    if not cfg.data.get("corpus"):
        raise ValidationError(f"{cfg.recipe} needs data.corpus")
    return load_corpus(cfg.data["corpus"])


def _two_pixel_data(cfg: RecipeConfig) -> np.ndarray:
    data = {**DATA_DEFAULTS, **cfg.data}
    images = load_corpus(data["corpus"]) if data["corpus"] else None
    count = scaled(data["pairs"], cfg.scale_factor, minimum=2)
    return natural_pixel_pairs(images, count, cfg.seed, data["std"], data["correlation"])


def train_two_pixel_ood(cfg: RecipeConfig, output_dir=None, max_workers: Optional[int] = None) -> TrainReport:
    """One softmax model over pixel pairs with the single output dimension loss"""
    raise_if_problems(validate_recipe(cfg))
    if cfg.recipe != "two_pixel_ood":
        raise ValidationError(f"train_two_pixel_ood cannot run recipe {cfg.recipe}")
    started = time.perf_counter()
    _, loss_cfg = loss_config_from_dict(cfg.loss)
    pairs = _two_pixel_data(cfg)
    models = init_models(cfg)
    init_hash = weights_hash(models)

    def loss_fn(outputs, _targets):
        loss, grad = e_ood(outputs[0], loss_cfg)
        return loss, [grad]

    batches = _shuffled_batches(pairs, None, {**DATA_DEFAULTS, **cfg.data}["batch_size"], cfg.seed)
    models, losses, lrs = fit(models, cfg, batches, loss_fn, max_workers)
    return _finish(cfg, models, init_hash, losses, lrs, started, output_dir)


def train_two_pixel_miod(cfg: RecipeConfig, output_dir=None, max_workers: Optional[int] = None) -> TrainReport:
    """D softmax models, one per output dimension, trained jointly on shared pixel-pair batches"""
    if cfg.n_models < 2:
        raise ValidationError(f"two_pixel_miod needs D >= 2 models, got {cfg.n_models}")
    raise_if_problems(validate_recipe(cfg))
    if cfg.recipe != "two_pixel_miod":
        raise ValidationError(f"train_two_pixel_miod cannot run recipe {cfg.recipe}")
    started = time.perf_counter()
    _, loss_cfg = loss_config_from_dict(cfg.loss)
    pairs = _two_pixel_data(cfg)
    models = init_models(cfg)
    init_hash = weights_hash(models)

    def loss_fn(outputs, _targets):
        return e_miod(outputs, loss_cfg)

    batches = _shuffled_batches(pairs, None, {**DATA_DEFAULTS, **cfg.data}["batch_size"], cfg.seed)
    models, losses, lrs = fit(models, cfg, batches, loss_fn, max_workers)
    return _finish(cfg, models, init_hash, losses, lrs, started, output_dir)


def sampler_config(cfg: RecipeConfig, epoch: int) -> SamplerConfig:
    """Sampler settings for one epoch, with image and patch counts shrunk by scale_factor"""
    settings = {**SAMPLER_DEFAULTS, **cfg.sampler}
    batch_images = scaled(settings["batch_images"], cfg.scale_factor)
    patches_per_image = scaled(settings["patches_per_image"], cfg.scale_factor)
    return SamplerConfig(
        seed=int(make_rng(cfg.seed, "sampler", epoch).integers(2**63)),
        batch_images=batch_images,
        patches_per_image=patches_per_image,
        minibatch_size=min(settings["minibatch_size"], batch_images * patches_per_image),
        flip_probability=settings["flip_probability"],
        sequential_minibatches=settings["sequential_minibatches"],
        batches=scaled(settings["batches"], cfg.scale_factor),
    )


def train_patch_model(cfg: RecipeConfig, output_dir=None, max_workers: Optional[int] = None,
                      images=None) -> TrainReport:
    """
    Sigmoid patch models under the repulsion loss.

    The grayscale recipe trains one model with several output nodes; the
    colour recipe trains many single-output models whose outputs are joined
    into one samples x nodes batch before the loss, so the node-wise term
    couples otherwise independent parameter sets.
    """
    raise_if_problems(validate_recipe(cfg))
    if not cfg.recipe.startswith("patch"):
        raise ValidationError(f"train_patch_model cannot run recipe {cfg.recipe}")
    started = time.perf_counter()
    _, loss_cfg = loss_config_from_dict(cfg.loss)
    images = images if images is not None else _load_required_corpus(cfg)
    models = init_models(cfg)
    init_hash = weights_hash(models)
    splits = np.cumsum([model.output_dim for model in models])[:-1]

    def loss_fn(outputs, _targets):
        loss, grad = repel(np.hstack(outputs), loss_cfg)
        return loss, np.split(grad, splits, axis=1)

    def epoch_batches(epoch):
        stream = sample_patches(images, sampler_config(cfg, epoch), cfg.patch_size, cfg.channels)
        for batch in stream:
            yield batch.values, None

    models, losses, lrs = fit(models, cfg, epoch_batches, loss_fn, max_workers)
    return _finish(cfg, models, init_hash, losses, lrs, started, output_dir)


def train_decoder(cfg: RecipeConfig, output_dir=None, max_workers: Optional[int] = None,
                  encoders: Optional[Sequence[MlpModel]] = None, images=None) -> TrainReport:
    """Fit a decoder from rounded codes to the mean patch of every code"""
    raise_if_problems(validate_recipe(cfg))
    if cfg.recipe != "decoder":
        raise ValidationError(f"train_decoder cannot run recipe {cfg.recipe}")
    started = time.perf_counter()
    settings = {**DECODER_DEFAULTS, **cfg.decoder}
    if encoders is None:
        if not settings["encoder_weights"]:
            raise ValidationError("decoder needs decoder.encoder_weights")
        encoders = load_weights(Path(settings["encoder_weights"]))
    images = images if images is not None else _load_required_corpus(cfg)
    patches = random_patches(images, scaled(settings["patches"], cfg.scale_factor),
                             cfg.seed, cfg.patch_size, cfg.channels)
    inputs, targets = decoder_table(encoders, patches.values, max_workers)

    models = init_models(cfg)
    if models[0].input_dim != inputs.shape[1]:
        raise ValidationError(f"decoder input {models[0].input_dim} does not match {inputs.shape[1]}-bit codes")
    init_hash = weights_hash(models)
    logger.info("decoder table holds %d distinct codes", len(inputs))

    def loss_fn(outputs, batch_targets):
        loss, grad = squared_error(outputs[0], batch_targets)
        return loss, [grad]

    batches = _shuffled_batches(inputs, targets, settings["batch_size"], cfg.seed)
    models, losses, lrs = fit(models, cfg, batches, loss_fn, max_workers)
    return _finish(cfg, models, init_hash, losses, lrs, started, output_dir)


def train(cfg: RecipeConfig, output_dir=None, max_workers: Optional[int] = None) -> TrainReport:
    """Dispatch to the recipe named in the configuration"""
    if cfg.recipe == "two_pixel_ood":
        return train_two_pixel_ood(cfg, output_dir, max_workers)
    if cfg.recipe == "two_pixel_miod":
        return train_two_pixel_miod(cfg, output_dir, max_workers)
    if cfg.recipe in ("patch_gray", "patch_color"):
        return train_patch_model(cfg, output_dir, max_workers)
    if cfg.recipe == "decoder":
        return train_decoder(cfg, output_dir, max_workers)
    raise ValidationError(f"recipe must be one of {RECIPES}, got {cfg.recipe!r}")
