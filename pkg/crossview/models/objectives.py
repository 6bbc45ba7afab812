import torch
from torch.nn import functional as F

from crossview.core.errors import ConfigurationError, NumericError, UsageError


def infonce_from_similarities(similarities: torch.Tensor, positive_index: int, tau: float) -> torch.Tensor:
    """
    -log softmax(similarities / tau)[positive_index], evaluated as
    logsumexp(logits - logits[positive]) so equal similarities give ln N exactly.
    """
    if similarities.numel() == 0:
        raise UsageError("InfoNCE needs a non-empty bank.")
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if not 0 <= positive_index < similarities.numel():
        raise UsageError(f"positive_index {positive_index} outside bank of {similarities.numel()}")
    logits = similarities / tau
    return torch.logsumexp(logits - logits[positive_index], dim=0)


def infonce(query: torch.Tensor, bank: torch.Tensor, positive_index: int, tau: float = 0.07) -> torch.Tensor:
    """
    Single-query InfoNCE of ``query`` (D,) against ``bank`` (N, D).

    Raises:
        UsageError: empty bank or invalid positive index.
    """
    if bank.dim() != 2 or bank.shape[0] == 0:
        raise UsageError("InfoNCE needs a non-empty (N, D) bank.")
    if bank.shape[1] != query.shape[-1]:
        raise ConfigurationError(f"Query dim {query.shape[-1]} does not match bank dim {bank.shape[1]}")
    return infonce_from_similarities(bank @ query, positive_index, tau)


def batch_infonce(
    ground: torch.Tensor, satellite: torch.Tensor, tau: float = 0.07, symmetric: bool = True
) -> torch.Tensor:
    """
    In-batch InfoNCE where row i of ``satellite`` is the positive of row i of
    ``ground``. ``symmetric`` averages the ground->satellite and
    satellite->ground directions.
    """
    if ground.shape != satellite.shape or ground.dim() != 2:
        raise ConfigurationError(f"Embedding batches differ: {tuple(ground.shape)} vs {tuple(satellite.shape)}")
    if ground.shape[0] == 0:
        raise UsageError("InfoNCE needs a non-empty batch.")
    logits = ground @ satellite.T / tau
    g2s = torch.logsumexp(logits - logits.diagonal().unsqueeze(1), dim=1).mean()
    if not symmetric:
        loss = g2s
    else:
        logits_t = logits.T
        s2g = torch.logsumexp(logits_t - logits_t.diagonal().unsqueeze(1), dim=1).mean()
        loss = 0.5 * (g2s + s2g)
    if not torch.isfinite(loss):
        raise NumericError("Non-finite InfoNCE loss")
    return loss


def kl_consistency(ground: torch.Tensor, satellite: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """
    KL(p||q) + KL(q||p) with p, q the softmax of each embedding over its
    dimensions. Batched inputs (B, D) are averaged over the batch.
    """
    if ground.shape != satellite.shape:
        raise ConfigurationError(f"Embedding shapes differ: {tuple(ground.shape)} vs {tuple(satellite.shape)}")
    log_p = F.log_softmax(ground / temperature, dim=-1)
    log_q = F.log_softmax(satellite / temperature, dim=-1)
    sym = ((log_p.exp() - log_q.exp()) * (log_p - log_q)).sum(dim=-1)
    return sym.mean() if sym.dim() > 0 else sym


def flow_loss(
    prediction: torch.Tensor,
    x_ground: torch.Tensor,
    x_satellite: torch.Tensor,
    reduction: str = "mean",
    target: str = "forward",
) -> torch.Tensor:
    """
    Regression of the predicted field onto v = x_s - x_g (or -v for the
    ``reverse`` target).

    ``mean`` is the mean squared elementwise error; ``norm`` is the per-sample
    L2 norm of the residual averaged over the batch (leading dimension).
    """
    if prediction.shape != x_ground.shape or x_ground.shape != x_satellite.shape:
        raise ConfigurationError(
            f"Shape mismatch: prediction {tuple(prediction.shape)}, "
            f"x_g {tuple(x_ground.shape)}, x_s {tuple(x_satellite.shape)}"
        )
    v = x_satellite - x_ground
    if target == "reverse":
        v = -v
    elif target != "forward":
        raise ConfigurationError(f"Unknown flow target {target!r}")

    residual = prediction - v
    if reduction == "mean":
        loss = (residual**2).mean()
    elif reduction == "norm":
        flat = residual.reshape(residual.shape[0], -1) if residual.dim() > 1 else residual.reshape(1, -1)
        loss = flat.norm(dim=1).mean()
    else:
        raise ConfigurationError(f"Unknown reduction {reduction!r}")
    if not torch.isfinite(loss):
        raise NumericError("Non-finite flow loss")
    return loss
