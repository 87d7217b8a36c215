"""The training objectives, inspected one at a time.

Walks through the contrastive term (with its closed-form sanity value),
the similarity-map -> soft-argmax position regression, and the gradient
checks that pin every backward pass to central differences.
"""

import math

import numpy as np

from crossview import losses as L
from crossview import tensor as T


def main():
    # symmetric InfoNCE on a 2-identity batch has a closed form
    eye = T.Tensor(np.eye(2))
    loss = L.info_nce_symmetric(None, eye, T.Tensor(np.eye(2)), temp=1.0)
    print(f"InfoNCE(identity pairs, tau=1) = {loss.item():.6f}")
    print(f"ln(1 + e^-1)                   = {math.log(1 + math.exp(-1)):.6f}\n")

    # position regression: a peaked similarity map soft-argmaxes to the peak
    m = np.full((8, 8), -0.2)
    m[5, 2] = 0.95
    xy = L.soft_match(None, T.Tensor(m), match_temp=0.05)
    print(f"soft-argmax of a peak at (col 2, row 5): ({xy.data[0]:.3f}, {xy.data[1]:.3f})\n")

    # one full position loss against its brute-force meaning
    rng = np.random.default_rng(0)
    fmap = T.Tensor(rng.normal(size=(8, 8, 4)))
    f_street = T.Tensor(rng.normal(size=4))
    f_bev = T.Tensor(rng.normal(size=4))
    prior = L.PositionPrior(3.0, 4.0)
    val = L.pcm_loss(None, f_street, f_bev, fmap, prior, match_temp=0.2)
    print(f"multi-level position loss at prior (3, 4): {val.item():.4f}\n")

    # every backward pass is pinned to central differences
    rep = T.finite_diff_check(
        lambda tape: L.pcm_loss(tape, f_street, f_bev, fmap, prior, 0.5),
        [f_street, f_bev, fmap],
        eps=1e-3,
        op_name="position loss",
    )
    print(
        f"gradient check [{rep.op_name}]: max rel error {rep.max_rel_error:.2e} "
        f"at eps {rep.eps}"
    )


if __name__ == "__main__":
    main()
