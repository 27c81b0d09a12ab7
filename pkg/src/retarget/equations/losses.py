"""
Training objectives written as pure functions of discriminator scores and
images. All logarithms are floored at `retarget.core.LOG_EPS`.
"""
import torch
import torch.nn.functional as F

from retarget.core import LOG_EPS
from retarget.core import ArgumentError
from retarget.models import Phase
from retarget.models import StreamRole
from retarget.models import quasi_ground_truth


def safe_log(x, eps=LOG_EPS):
    """
    Natural logarithm with the argument floored at `eps`.
    Parameters
    ----------
    x : torch.Tensor
        Argument, expected in [0, 1].
    eps : float, optional
        Floor of the argument.
    Returns
    -------
    torch.Tensor
        log(max(x, eps)), element-wise.
    """
    return torch.log(torch.clamp(x, min=eps))


def stream_loss(scores, target):
    """
    Mean negative log-likelihood of discriminator scores for one target.
    Parameters
    ----------
    scores : torch.Tensor
        Discriminator outputs in [0, 1].
    target : int
        0 if the stream should be scored low, 1 if high.
    Returns
    -------
    torch.Tensor
        -mean(log(1 - D)) for target 0, -mean(log D) for target 1.
    """
    if target:
        return -safe_log(scores).mean()
    return -safe_log(1 - scores).mean()


def discriminator_loss_phase_one(d_real, d_recon):
    """
    Negated joint adversarial objective seen by the discriminator.
    Real images are pushed to 0, reconstructions of noisy images to 1.
    Parameters
    ----------
    d_real : torch.Tensor
        D(X).
    d_recon : torch.Tensor
        D(G(X~)).
    Returns
    -------
    torch.Tensor
        -(mean log(1 - D(X)) + mean log D(G(X~))).
    """
    return (stream_loss(d_real, quasi_ground_truth(StreamRole.REAL, Phase.ONE))
            + stream_loss(d_recon, quasi_ground_truth(StreamRole.RECON, Phase.ONE)))


def generator_adversarial_loss(d_recon):
    """
    Non-saturating adversarial loss of the generator.
    Under the inverted labels (real -> 0) the generator wants D(G(X~)) -> 0.
    Returns
    -------
    torch.Tensor
        -mean(log(1 - D(G(X~)))).
    """
    return -safe_log(1 - d_recon).mean()


def reconstruction_loss(x, x_hat):
    """
    Mean squared reconstruction error, always >= 0.
    """
    return F.mse_loss(x_hat, x)


def generator_loss(d_recon, x, x_hat, lambda_recon):
    """
    Phase-one generator objective: adversarial term plus weighted reconstruction.
    Parameters
    ----------
    d_recon : torch.Tensor
        D(G(X~)), computed with gradients flowing into G.
    x : torch.Tensor
        Clean images.
    x_hat : torch.Tensor
        G(X~).
    lambda_recon : float
        Weight of the reconstruction term.
    Returns
    -------
    total : torch.Tensor
        adversarial + lambda_recon * reconstruction.
    adversarial : torch.Tensor
    reconstruction : torch.Tensor
    """
    adversarial = generator_adversarial_loss(d_recon)
    reconstruction = reconstruction_loss(x, x_hat)
    return adversarial + lambda_recon * reconstruction, adversarial, reconstruction


def phase_two_weights(alpha, beta):
    """
    Trade-off weight of every stream of the phase-two objective.
    """
    return {
        StreamRole.REAL: alpha,
        StreamRole.RECON: 1 - alpha,
        StreamRole.LOW: beta,
        StreamRole.PSEUDO_RECON: 1 - beta,
        StreamRole.PSEUDO_MIX: 1 - beta,
    }


def phase_two_loss(scores, alpha, beta):
    """
    Negated phase-two discriminator objective.
    alpha*log(1 - D(X)) + (1 - alpha)*log(1 - D(X^)) + beta*log D(X^low)
    + (1 - beta)*log D(X^pseudo), each term averaged over its stream.
    Missing or empty streams drop their term.
    Parameters
    ----------
    scores : dict[StreamRole, torch.Tensor]
        Discriminator outputs per stream.
    alpha, beta : float
        Trade-off weights of the good and the bad streams.
    Returns
    -------
    total : torch.Tensor
        Loss to minimise.
    terms : dict[StreamRole, torch.Tensor]
        Weighted contribution of every present stream.
    """
    weights = phase_two_weights(alpha, beta)
    terms = {}
    total = None
    for role, s in scores.items():
        if s is None or s.numel() == 0:
            continue
        role = StreamRole(role)
        target = quasi_ground_truth(role, Phase.TWO)
        term = weights[role] * stream_loss(s, target)
        terms[role] = term
        total = term if total is None else total + term
    if total is None:
        raise ArgumentError("phase two needs at least one non-empty stream")
    return total, terms
