"""
Staged joint cross-view training.

Stage 1 trains the GeoMap head on the retrieval loss. The second schedule runs
T3 epochs: the first T2 train the flow network alone with conditions from the
current GeoMap, the remaining T3 - T2 also fine-tune GeoMap on the retrieval
loss plus alpha times the symmetric KL consistency loss.

Every epoch appends one row to ``log.jsonl`` and rewrites ``last.ckpt``.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch

import crossview
from crossview.core.errors import ConfigurationError, NumericError, UsageError
from crossview.data.images import read_rgb
from crossview.data.manifest import DatasetManifest
from crossview.evaluation.retrieval import recall_at_k
from crossview.models.backends import parameter_hash
from crossview.models.geoflow import GeoFlow, SpaceToDepthCodec, VelocityNet
from crossview.models.geoflow import train_step as flow_train_step
from crossview.models.geomap import GeoMap, GeoMapHead
from crossview.models.objectives import batch_infonce, kl_consistency
from crossview.training import checkpoint
from crossview.training.config import RunConfig

logger = logging.getLogger(__name__)

LOG_KEYS = ("epoch", "stage", "L_GL", "L_IG", "L_KL", "R@1")


def configure_determinism(config: RunConfig):
    """Single-threaded, deterministic kernels and seeded global generators."""
    torch.manual_seed(config.seed)
    np.random.seed(config.seed % 2**32)
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def _optimizer(params, kind: str, lr: float) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


@dataclass
class TrainState:
    """Everything that evolves during training."""

    head: GeoMapHead
    net: VelocityNet
    beta_optimizer: torch.optim.Optimizer
    theta_optimizer: torch.optim.Optimizer
    generator: torch.Generator
    epoch: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)

    def beta_hash(self) -> str:
        return parameter_hash(self.head)

    def theta_hash(self) -> str:
        return parameter_hash(self.net)


def initial_state(config: RunConfig) -> TrainState:
    """β and θ initialised from ``config.seed``."""
    config.validate()
    configure_determinism(config)
    head = GeoMapHead(config.backend, config.geomap)
    net = VelocityNet(config.codec.latent_shape, config.backend.token_dim, config.flow)
    return TrainState(
        head=head,
        net=net,
        beta_optimizer=_optimizer(head.parameters(), config.optimizer, config.lr1),
        theta_optimizer=_optimizer(net.parameters(), config.optimizer, config.lr2),
        generator=torch.Generator().manual_seed(config.seed),
    )


def stage_of(epoch: int, config: RunConfig) -> int:
    """Stage (1, 2 or 3) that runs at the 0-based global ``epoch``."""
    if epoch < config.t1:
        return 1
    if epoch - config.t1 < config.t2:
        return 2
    return 3


class PairCache:
    """
    Backend features and codec latents of every manifest entry, computed once.
    The backends are frozen, so cached features stay valid for the whole run.
    """

    def __init__(self, manifest: DatasetManifest, geomap: GeoMap, codec: SpaceToDepthCodec):
        self.manifest = manifest
        ground_feats, sat_feats = [], []
        ground_latents, sat_latents = [], []
        sat_cache: dict[str, tuple] = {}
        for entry in manifest.entries:
            ground = read_rgb(manifest.ground_path(entry))
            ground_feats.append(geomap.ground_features(ground))
            ground_latents.append(codec.encode(ground)[0])
            if entry.satellite_id not in sat_cache:
                satellite = read_rgb(manifest.satellite_path(entry))
                sat_cache[entry.satellite_id] = (geomap.satellite_features(satellite), codec.encode(satellite)[0])
            feats, latent = sat_cache[entry.satellite_id]
            sat_feats.append(feats)
            sat_latents.append(latent)

        self.ground_geometry, self.ground_semantic = GeoMap._stack(ground_feats)
        self.satellite_geometry, self.satellite_semantic = GeoMap._stack(sat_feats)
        self.ground_latents = torch.stack(ground_latents)
        self.satellite_latents = torch.stack(sat_latents)
        logger.debug("Cached features for %d pairs", len(manifest))

    def __len__(self):
        return len(self.manifest)

    @staticmethod
    def _take(t: Optional[torch.Tensor], index: torch.Tensor) -> Optional[torch.Tensor]:
        return None if t is None else t[index]

    def embed(self, head: GeoMapHead, index: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f_g = head.forward_ground(self._take(self.ground_geometry, index), self.ground_semantic[index])
        f_s = head.forward_satellite(self._take(self.satellite_geometry, index), self.satellite_semantic[index])
        return f_g, f_s


def _batches(n: int, batch_size: int, generator: torch.Generator) -> list[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a single-sample batch has no negatives
    return [b for b in batches if len(b) >= 2]


def _check(value: torch.Tensor, name: str, epoch: int, batch: int):
    if not torch.isfinite(value):
        raise NumericError(f"{name} is not finite", epoch=epoch, batch=batch)


def map_gradients(
    head: GeoMapHead, cache: PairCache, index: torch.Tensor, config: RunConfig, alpha: Optional[float] = None
) -> torch.Tensor:
    """
    Flattened β gradient of L_GL + alpha L_KL on one batch. With alpha=None it is
    the stage-1 gradient of L_GL alone.
    """
    head.zero_grad(set_to_none=True)
    f_g, f_s = cache.embed(head, index)
    loss = batch_infonce(f_g, f_s, config.loss.tau, config.loss.infonce_symmetric)
    if alpha is not None:
        loss = loss + alpha * kl_consistency(f_g, f_s, config.loss.kl_temperature)
    loss.backward()
    grads = [p.grad.flatten() if p.grad is not None else torch.zeros(p.numel()) for p in head.parameters()]
    head.zero_grad(set_to_none=True)
    return torch.cat(grads)


class Trainer:
    """
    Runs the schedule over a manifest's ``train`` split and validates on ``val``.

    Args:
        config (RunConfig): Schedule, model shapes and seeds.
        manifest (DatasetManifest): Full manifest; splits are taken from it.
        out_dir (Path|None): Where ``log.jsonl`` and checkpoints go.
    """

    def __init__(self, config: RunConfig, manifest: DatasetManifest, out_dir: Optional[Union[str, Path]] = None):
        self.config = config.validate()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.state = initial_state(config)
        self.geomap = GeoMap(config.backend, config.geomap, head=self.state.head)
        self.codec = SpaceToDepthCodec(config.codec)
        self.flow = GeoFlow(self.codec, self.state.net)

        train = manifest.subset("train")
        if len(train) < 2:
            raise UsageError("Training needs at least 2 pairs in the train split.")
        self.train_cache = PairCache(train, self.geomap, self.codec)
        val = manifest.subset("val")
        self.val_cache = PairCache(val, self.geomap, self.codec) if len(val) >= 2 else None
        self._backend_hash = self.geomap.backend_hash()

    # -- checkpoints -------------------------------------------------------

    def checkpoint_payload(self) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
        state = self.state
        tensors: dict[str, torch.Tensor] = {}
        for name, value in state.head.state_dict().items():
            tensors[f"beta/{name}"] = value
        for name, value in state.net.state_dict().items():
            tensors[f"theta/{name}"] = value
        beta_header, beta_tensors = checkpoint.optimizer_to_checkpoint(state.beta_optimizer, "opt_beta")
        theta_header, theta_tensors = checkpoint.optimizer_to_checkpoint(state.theta_optimizer, "opt_theta")
        tensors.update(beta_tensors)
        tensors.update(theta_tensors)
        tensors["rng/generator"] = state.generator.get_state()

        header = {
            "versions": {"crossview": crossview.__version__},
            "fingerprint": self.config.fingerprint(),
            "config": self.config.to_dict(),
            "epoch": state.epoch,
            "stage": stage_of(max(state.epoch - 1, 0), self.config),
            "history": state.history,
            "optimizers": {"beta": beta_header, "theta": theta_header},
        }
        return header, tensors

    def save_checkpoint(self, path: Union[str, Path]) -> str:
        header, tensors = self.checkpoint_payload()
        return checkpoint.save(path, header, tensors)

    def load_checkpoint(self, path: Union[str, Path]):
        """
        Restores β, θ, optimizer states, the generator and the history.

        Raises:
            ConfigurationError: if the checkpoint was written under another configuration.
        """
        header, tensors = checkpoint.load(path)
        if header.get("fingerprint") != self.config.fingerprint():
            raise ConfigurationError(
                f"Checkpoint {path} was written for config {header.get('fingerprint')}, "
                f"current config is {self.config.fingerprint()}"
            )
        restore_modules(self.state.head, self.state.net, tensors)
        checkpoint.optimizer_from_checkpoint(self.state.beta_optimizer, header["optimizers"]["beta"], tensors, "opt_beta")
        checkpoint.optimizer_from_checkpoint(
            self.state.theta_optimizer, header["optimizers"]["theta"], tensors, "opt_theta"
        )
        self.state.generator.set_state(tensors["rng/generator"])
        self.state.epoch = int(header["epoch"])
        self.state.history = list(header["history"])
        logger.info("Resumed from %s at epoch %d", path, self.state.epoch)

    # -- epochs ------------------------------------------------------------

    def _set_lr(self, optimizer: torch.optim.Optimizer, lr: float):
        for group in optimizer.param_groups:
            group["lr"] = lr

    def stage1_epoch(self, epoch: int) -> dict[str, Any]:
        state, cfg = self.state, self.config
        self._set_lr(state.beta_optimizer, cfg.lr1)
        state.head.train()
        losses = []
        for b, index in enumerate(_batches(len(self.train_cache), cfg.batch_size, state.generator)):
            f_g, f_s = self.train_cache.embed(state.head, index)
            loss = batch_infonce(f_g, f_s, cfg.loss.tau, cfg.loss.infonce_symmetric)
            _check(loss, "L_GL", epoch, b)
            state.beta_optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.beta_optimizer.step()
            losses.append(float(loss.detach()))
        return {"L_GL": _mean(losses), "L_IG": None, "L_KL": None}

    def stage2_epoch(self, epoch: int) -> dict[str, Any]:
        state, cfg = self.state, self.config
        self._set_lr(state.theta_optimizer, cfg.lr2)
        losses = []
        for b, index in enumerate(_batches(len(self.train_cache), cfg.batch_size, state.generator)):
            state.head.eval()
            with torch.no_grad():
                c, _ = self.train_cache.embed(state.head, index)
            try:
                loss = flow_train_step(
                    state.net,
                    state.theta_optimizer,
                    self.train_cache.ground_latents[index],
                    self.train_cache.satellite_latents[index],
                    c,
                    state.generator,
                    cfg.loss,
                )
            except NumericError as e:
                raise NumericError(str(e), epoch=epoch, batch=b) from e
            losses.append(loss)
        return {"L_GL": None, "L_IG": _mean(losses), "L_KL": None}

    def joint_epoch(self, epoch: int) -> dict[str, Any]:
        state, cfg = self.state, self.config
        self._set_lr(state.beta_optimizer, cfg.lr3)
        self._set_lr(state.theta_optimizer, cfg.lr2)
        gl, ig, kl = [], [], []
        for b, index in enumerate(_batches(len(self.train_cache), cfg.batch_size, state.generator)):
            state.head.train()
            f_g, f_s = self.train_cache.embed(state.head, index)
            l_gl = batch_infonce(f_g, f_s, cfg.loss.tau, cfg.loss.infonce_symmetric)
            l_kl = kl_consistency(f_g, f_s, cfg.loss.kl_temperature)
            loss = l_gl + cfg.loss.alpha * l_kl
            _check(loss, "L_GL + alpha L_KL", epoch, b)
            state.beta_optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.beta_optimizer.step()

            try:
                l_ig = flow_train_step(
                    state.net,
                    state.theta_optimizer,
                    self.train_cache.ground_latents[index],
                    self.train_cache.satellite_latents[index],
                    f_g.detach(),
                    state.generator,
                    cfg.loss,
                )
            except NumericError as e:
                raise NumericError(str(e), epoch=epoch, batch=b) from e
            gl.append(float(l_gl.detach()))
            kl.append(float(l_kl.detach()))
            ig.append(l_ig)
        return {"L_GL": _mean(gl), "L_IG": _mean(ig), "L_KL": _mean(kl)}

    # -- validation --------------------------------------------------------

    @torch.no_grad()
    def validation_embeddings(self, cache: Optional[PairCache] = None) -> tuple[torch.Tensor, torch.Tensor]:
        cache = cache or self.val_cache or self.train_cache
        self.state.head.eval()
        index = torch.arange(len(cache))
        return cache.embed(self.state.head, index)

    def validation_recall(self, cache: Optional[PairCache] = None) -> Optional[float]:
        cache = cache or self.val_cache
        if cache is None:
            return None
        f_g, f_s = self.validation_embeddings(cache)
        # duplicated satellites (many_to_one) collapse onto their first row
        first: dict[str, int] = {}
        rows, positives = [], []
        for i, entry in enumerate(cache.manifest.entries):
            if entry.satellite_id not in first:
                first[entry.satellite_id] = len(rows)
                rows.append(i)
            positives.append([first[entry.satellite_id]])
        return recall_at_k(f_g.numpy(), f_s[rows].numpy(), positives, 1)

    def mean_kl(self, cache: Optional[PairCache] = None) -> float:
        """Mean symmetric KL between matched embeddings of a split."""
        f_g, f_s = self.validation_embeddings(cache)
        return float(kl_consistency(f_g, f_s, self.config.loss.kl_temperature))

    # -- schedule ----------------------------------------------------------

    def total_epochs(self, last_stage: int = 3) -> int:
        cfg = self.config
        return {1: cfg.t1, 2: cfg.t1 + cfg.t2, 3: cfg.t1 + cfg.t3}[last_stage]

    def _run_epoch(self, epoch: int) -> dict[str, Any]:
        stage = stage_of(epoch, self.config)
        if stage == 1:
            metrics = self.stage1_epoch(epoch)
        elif stage == 2:
            metrics = self.stage2_epoch(epoch)
        else:
            metrics = self.joint_epoch(epoch)

        stage_end = epoch + 1 in (self.config.t1, self.config.t1 + self.config.t2, self.config.t1 + self.config.t3)
        recall = None
        if (epoch + 1) % self.config.validate_every == 0 or stage_end:
            recall = self.validation_recall()
        row = {"epoch": epoch, "stage": stage, **metrics, "R@1": recall}
        return {key: row[key] for key in LOG_KEYS}

    def run(self, last_stage: int = 3, max_epochs: Optional[int] = None) -> TrainState:
        """
        Runs epochs from the current state up to the end of ``last_stage``,
        stopping early once the global epoch count reaches ``max_epochs``.
        """
        if last_stage not in (1, 2, 3):
            raise UsageError(f"last_stage must be 1, 2 or 3, got {last_stage}")
        end = self.total_epochs(last_stage)
        budget = max_epochs if max_epochs is not None else self.config.max_epochs
        if budget is not None:
            end = min(end, budget)

        state = self.state
        while state.epoch < end:
            epoch = state.epoch
            stage = stage_of(epoch, self.config)
            if epoch == 0 or stage != stage_of(epoch - 1, self.config):
                logger.info("Stage %d starts at epoch %d", stage, epoch)
                if stage == 2:
                    logger.info("Stage-2 updates θ with the gradient of the flow loss L_IG")
            row = self._run_epoch(epoch)
            state.history.append(row)
            state.epoch += 1
            logger.debug("epoch %d: %s", epoch, row)
            self._write_artifacts()

        if self.geomap.backend_hash() != self._backend_hash:
            raise ConfigurationError("Frozen backend parameters changed during training")
        return state

    def _write_artifacts(self):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_log(self.out_dir / "log.jsonl", self.state.history)
        self.save_checkpoint(self.out_dir / "last.ckpt")


def restore_modules(head: GeoMapHead, net: VelocityNet, tensors: dict[str, torch.Tensor]):
    head.load_state_dict({k[len("beta/") :]: v for k, v in tensors.items() if k.startswith("beta/")})
    net.load_state_dict({k[len("theta/") :]: v for k, v in tensors.items() if k.startswith("theta/")})


def write_log(path: Union[str, Path], history: list[dict[str, Any]]):
    """One JSON object per epoch with keys epoch, stage, L_GL, L_IG, L_KL, R@1."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in history:
            f.write(json.dumps({k: row.get(k) for k in LOG_KEYS}) + "\n")


def _mean(values: list[float]) -> Optional[float]:
    if not values:
        return None
    return math.fsum(values) / len(values)


def load_models(path: Union[str, Path]) -> tuple[RunConfig, GeoMap, GeoFlow, str]:
    """
    Rebuilds GeoMap and GeoFlow from a checkpoint for inference.

    Returns:
        (config, geomap, flow, sha256 of the checkpoint file)
    """
    header, tensors = checkpoint.load(path)
    config = RunConfig.from_dict(header["config"])
    head = GeoMapHead(config.backend, config.geomap)
    net = VelocityNet(config.codec.latent_shape, config.backend.token_dim, config.flow)
    restore_modules(head, net, tensors)
    head.eval()
    net.eval()
    geomap = GeoMap(config.backend, config.geomap, head=head)
    flow = GeoFlow(SpaceToDepthCodec(config.codec), net)
    return config, geomap, flow, checkpoint.file_hash(path)


def train_stage1(manifest: DatasetManifest, config: RunConfig, out_dir=None) -> Trainer:
    trainer = Trainer(config, manifest, out_dir)
    trainer.run(last_stage=1)
    return trainer


def train_stage2(trainer: Trainer) -> Trainer:
    if trainer.state.epoch < trainer.config.t1:
        raise UsageError("Stage 2 needs a completed stage 1.")
    trainer.run(last_stage=2)
    return trainer


def joint_finetune(trainer: Trainer) -> Trainer:
    if trainer.state.epoch < trainer.config.t1 + trainer.config.t2:
        raise UsageError("Joint fine-tuning needs completed stages 1 and 2.")
    trainer.run(last_stage=3)
    return trainer


def run_schedule(
    config: RunConfig,
    manifest: DatasetManifest,
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
    last_stage: int = 3,
) -> Trainer:
    """
    Full schedule with artifacts in ``out_dir``; resumes from ``resume`` if given.
    The final checkpoint is also copied to ``final.ckpt``.
    """
    trainer = Trainer(config, manifest, out_dir)
    if resume is not None:
        trainer.load_checkpoint(resume)
    trainer.run(last_stage=last_stage)
    if trainer.state.epoch >= trainer.total_epochs(last_stage):
        trainer.save_checkpoint(Path(out_dir) / "final.ckpt")
    return trainer
