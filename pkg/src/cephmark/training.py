"""Training loop, checkpointing, evaluation orchestration, and prediction.

Checkpoints are .npz containers holding the full parameter set, the training
configuration, and a manifest whose digest is verified on load. Runs are
deterministic for a fixed seed in single-threaded mode.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import backbone as bb
from .afpf import PredictionMaps, dump_prediction_maps
from .data import (
    Dataset,
    Direction,
    LandmarkSet,
    load_image,
    map_coords,
    open_dataset,
    resize_to_network,
    write_annotation,
)
from .decoder import decode, dump_activation_maps
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .metrics import EvaluationReport, aggregate, radial_errors
from .model import LandmarkNet, ModelConfig
from .targets import TargetConfig, TargetMaps, heat_loss, make_targets, offset_loss, stack_targets, total_loss

log = logging.getLogger("cephmark")


@dataclass
class TrainConfig:
    dataset_dir: Path = Path(".")
    checkpoint_dir: Path = Path("checkpoints")
    backbone: str = bb.VGG19_STYLE
    n_landmarks: int = 19
    radius: int = 40
    alpha: float = 2.0 / 3.0
    epochs: int = 350
    batch_size: int = 1
    optimizer: str = "adadelta"
    seed: int = 0
    network_height: int = 800
    network_width: int = 640
    fused_channels: int = 256
    lateral_channels: int = 128
    attn_hidden: int = 64
    weights_source: Path | None = None
    threads: int = 1
    early_stop_mre_mm: float | None = None

    def __post_init__(self):
        self.dataset_dir = Path(self.dataset_dir)
        self.checkpoint_dir = Path(self.checkpoint_dir)
        if self.weights_source is not None:
            self.weights_source = Path(self.weights_source)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.optimizer != "adadelta":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}; only 'adadelta' is available")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        try:
            spec = bb.spec_for(self.backbone)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        if self.radius < spec.max_stride:
            raise ConfigError(
                f"radius {self.radius} is below the max tap stride {spec.max_stride}; the smallest "
                f"feature map would see no activated cell"
            )
        try:
            self.model_config()
            TargetConfig(radius=self.radius, alpha=self.alpha)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            n_landmarks=self.n_landmarks,
            network_height=self.network_height,
            network_width=self.network_width,
            fused_channels=self.fused_channels,
            lateral_channels=self.lateral_channels,
            attn_hidden=self.attn_hidden,
            seed=self.seed,
            weights_source=self.weights_source,
        )

    def target_config(self) -> TargetConfig:
        return TargetConfig(radius=self.radius, alpha=self.alpha)

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        for key, value in payload.items():
            if isinstance(value, Path):
                payload[key] = str(value)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        payload = json.loads(text)
        if payload.get("weights_source") is not None:
            payload["weights_source"] = Path(payload["weights_source"])
        return cls(**payload)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


_INT_FIELDS = {f.name for f in dataclasses.fields(TrainConfig) if f.type in ("int",)}
_FLOAT_FIELDS = {"alpha"}
_OPTIONAL_FLOAT_FIELDS = {"early_stop_mre_mm"}
_PATH_FIELDS = {"dataset_dir", "checkpoint_dir", "weights_source"}


def load_train_config(path: Path, overrides: dict | None = None) -> TrainConfig:
    """Read a sectioned key-value config file; CLI overrides win key by key."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            values[key] = raw
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                values[key] = value
    kwargs: dict = {}
    for key, raw in values.items():
        try:
            if key in _INT_FIELDS:
                kwargs[key] = int(raw)
            elif key in _FLOAT_FIELDS:
                kwargs[key] = float(raw)
            elif key in _OPTIONAL_FLOAT_FIELDS:
                kwargs[key] = None if raw in (None, "", "none") else float(raw)
            elif key in _PATH_FIELDS:
                kwargs[key] = None if raw in (None, "", "none") else Path(raw)
            else:
                kwargs[key] = raw
        except (TypeError, ValueError):
            raise ConfigError(f"invalid value {raw!r} for config key {key!r}") from None
    return TrainConfig(**kwargs)


@dataclass
class CheckpointManifest:
    config_digest: str
    epoch: int
    wall_clock_s: float
    val_mre_mm: float
    backbone_digest: str
    params_digest: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CheckpointManifest":
        return cls(**json.loads(text))


def _net_params_digest(net: torch.nn.Module) -> str:
    return bb.state_digest(net)


def save_checkpoint(
    path: Path,
    net: LandmarkNet,
    cfg: TrainConfig,
    epoch: int,
    wall_clock_s: float,
    val_mre_mm: float,
) -> CheckpointManifest:
    manifest = CheckpointManifest(
        config_digest=cfg.digest(),
        epoch=epoch,
        wall_clock_s=wall_clock_s,
        val_mre_mm=val_mre_mm,
        backbone_digest=bb.state_digest(net.backbone),
        params_digest=_net_params_digest(net),
    )
    state = {name: tensor.detach().cpu().numpy() for name, tensor in net.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        __config__=np.array(cfg.to_json()),
        __manifest__=np.array(manifest.to_json()),
        **{f"param/{name}": arr for name, arr in state.items()},
    )
    return manifest


def load_checkpoint(path: Path) -> tuple[LandmarkNet, TrainConfig, CheckpointManifest]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__config__" not in archive or "__manifest__" not in archive:
            raise FormatError(f"{path}: not a cephmark checkpoint (missing config/manifest)")
        cfg = TrainConfig.from_json(str(archive["__config__"]))
        manifest = CheckpointManifest.from_json(str(archive["__manifest__"]))
        stored = {key[len("param/") :]: archive[key] for key in archive.files if key.startswith("param/")}
    model_cfg = dataclasses.replace(cfg.model_config(), weights_source=None)
    net = LandmarkNet(model_cfg)
    expected = net.state_dict()
    if set(expected) != set(stored):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise FormatError(f"{path}: parameter names do not match (missing {missing}, extra {extra})")
    for name, tensor in expected.items():
        if tuple(stored[name].shape) != tuple(tensor.shape):
            raise FormatError(
                f"{path}: layer {name!r} has shape {tuple(stored[name].shape)}, expected {tuple(tensor.shape)}"
            )
    net.load_state_dict({name: torch.from_numpy(arr) for name, arr in stored.items()})
    if _net_params_digest(net) != manifest.params_digest:
        raise FormatError(f"{path}: stored parameters do not match the manifest digest")
    net.backbone_digest = manifest.backbone_digest
    return net, cfg, manifest


@dataclass
class _Sample:
    ident: str
    image: torch.Tensor  # (1, H, W) network-resolution grid
    gt_original: LandmarkSet
    gt_network: LandmarkSet
    transform: object
    spacing_mm: float
    targets: TargetMaps | None = None


def _prepare_samples(dataset: Dataset, ids: tuple[str, ...], cfg: TrainConfig, with_targets: bool) -> list[_Sample]:
    samples = []
    target_cfg = cfg.target_config()
    for ident in ids:
        image, gt = dataset.load(ident)
        grid, transform = resize_to_network(image, cfg.network_height, cfg.network_width)
        gt_network = map_coords(transform, gt, Direction.FORWARD)
        sample = _Sample(
            ident=ident,
            image=torch.from_numpy(grid).unsqueeze(0),
            gt_original=gt,
            gt_network=gt_network,
            transform=transform,
            spacing_mm=image.spacing_mm,
        )
        if with_targets:
            sample.targets = make_targets(
                gt_network, (cfg.network_height, cfg.network_width), target_cfg
            )
        samples.append(sample)
    return samples


def _evaluate_samples(net: LandmarkNet, samples: list[_Sample], radius: int) -> EvaluationReport:
    net.eval()
    rows = []
    predicted: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for sample in samples:
            heat, offsets = net(sample.image.unsqueeze(0))
            maps = PredictionMaps.from_batch(heat, offsets, 0)
            network_pts = decode(maps, radius)
            original_pts = map_coords(sample.transform, network_pts, Direction.INVERSE)
            rows.append(radial_errors(original_pts, sample.gt_original, sample.spacing_mm))
            predicted[sample.ident] = original_pts.points
    net.train()
    report = aggregate(np.stack(rows))
    report.predicted_points = predicted
    return report


def train(cfg: TrainConfig) -> CheckpointManifest:
    """Minimize the combined heat/offset loss; keeps the best-validation checkpoint.

    Per-epoch train loss and validation MRE are logged and appended to
    ``checkpoint_dir/history.csv``. When the dataset has no validate split the
    training split doubles as the validation set (the overfit-test convention).
    """
    cfg.validate()
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    started = time.time()

    dataset = open_dataset(cfg.dataset_dir, n_landmarks=cfg.n_landmarks)
    train_ids = dataset.split.train
    if not train_ids:
        raise ContractError(f"dataset {cfg.dataset_dir} has an empty train split")
    train_samples = _prepare_samples(dataset, train_ids, cfg, with_targets=True)
    val_ids = dataset.split.validate
    val_samples = _prepare_samples(dataset, val_ids, cfg, with_targets=False) if val_ids else train_samples

    net = LandmarkNet(cfg.model_config())
    optimizer = torch.optim.Adadelta(net.parameters())  # standard defaults
    target_cfg = cfg.target_config()

    rng = np.random.default_rng(cfg.seed)
    checkpoint_path = cfg.checkpoint_dir / "best.npz"
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    history_path = cfg.checkpoint_dir / "history.csv"
    best_mre = float("inf")
    best_manifest: CheckpointManifest | None = None

    with open(history_path, "w", encoding="ascii") as history:
        history.write("epoch,train_loss,val_mre_mm\n")
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_samples))
            running, seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
                images = torch.stack([s.image for s in batch])
                targets = stack_targets([s.targets for s in batch])
                heat, offsets = net(images)
                loss = total_loss(heat_loss(heat, targets), offset_loss(offsets, targets), target_cfg)
                if not torch.isfinite(loss):
                    idents = ", ".join(s.ident for s in batch)
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} on sample(s) {idents}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                running += loss.item() * len(batch)
                seen += len(batch)
            train_loss = running / seen
            report = _evaluate_samples(net, val_samples, cfg.radius)
            val_mre = report.mre_mm
            history.write(f"{epoch},{train_loss:.17g},{val_mre:.17g}\n")
            log.info("epoch %d: train_loss=%.6f val_mre=%.4f mm", epoch, train_loss, val_mre)
            if val_mre < best_mre:
                best_mre = val_mre
                best_manifest = save_checkpoint(
                    checkpoint_path, net, cfg, epoch, time.time() - started, val_mre
                )
            if cfg.early_stop_mre_mm is not None and val_mre <= cfg.early_stop_mre_mm:
                log.info("early stop: validation MRE %.4f <= %.4f", val_mre, cfg.early_stop_mre_mm)
                break

    assert best_manifest is not None
    return best_manifest


def evaluate(checkpoint_path: Path, dataset_dir: Path, split: str = "test") -> EvaluationReport:
    """Decode every sample of a split and aggregate ORIGINAL-frame radial errors."""
    net, cfg, _ = load_checkpoint(checkpoint_path)
    torch.set_num_threads(cfg.threads)
    dataset = open_dataset(dataset_dir, n_landmarks=cfg.n_landmarks)
    ids = dataset.sample_ids(split)
    if not ids:
        raise ContractError(f"dataset {dataset_dir} has an empty '{split}' split")
    samples = _prepare_samples(dataset, ids, cfg, with_targets=False)
    return _evaluate_samples(net, samples, cfg.radius)


def predict(
    checkpoint_path: Path,
    image_path: Path,
    out_path: Path | None = None,
    dump_dir: Path | None = None,
    spacing_mm: float | None = None,
) -> LandmarkSet:
    """Predict ORIGINAL-frame landmarks for one image; optionally dump maps.

    The output text file uses the same "x,y" line format the ingester reads.
    """
    net, cfg, _ = load_checkpoint(checkpoint_path)
    torch.set_num_threads(cfg.threads)
    image = load_image(image_path) if spacing_mm is None else load_image(image_path, spacing_mm)
    grid, transform = resize_to_network(image, cfg.network_height, cfg.network_width)
    net.eval()
    with torch.no_grad():
        heat, offsets = net(torch.from_numpy(grid)[None, None])
    maps = PredictionMaps.from_batch(heat, offsets, 0)
    network_pts, activations = decode(maps, cfg.radius, return_activations=True)
    original_pts = map_coords(transform, network_pts, Direction.INVERSE)
    if out_path is not None:
        write_annotation(Path(out_path), original_pts.points)
    if dump_dir is not None:
        dump_prediction_maps(Path(dump_dir), maps)
        dump_activation_maps(Path(dump_dir), activations)
    return original_pts
