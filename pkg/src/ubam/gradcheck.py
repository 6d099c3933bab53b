"""Central finite-difference verification of autograd gradients."""

from __future__ import annotations

import numpy as np
import torch


def finite_difference_check(loss_fn, parameters, n_samples_per_tensor: int = 4,
                            eps: float = 1e-5, rtol: float = 1e-3,
                            atol: float = 1e-8, seed: int = 0) -> dict:
    """Compare d loss / d theta from autograd against (f(+h) - f(-h)) / 2h.

    `loss_fn` must be a deterministic scalar function of the parameters
    (fix any sampling noise before calling). Parameters should be float64
    for the stated tolerances to be meaningful. Returns per-sample
    records and the overall pass fraction.
    """
    params = [p for p in parameters if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    records = []
    for p, g in zip(params, grads):
        flat = p.detach().reshape(-1)
        n = min(n_samples_per_tensor, flat.numel())
        idxs = rng.choice(flat.numel(), size=n, replace=False)
        for idx in idxs:
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + eps
                lp = float(loss_fn())
                flat[idx] = orig - eps
                lm = float(loss_fn())
                flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = 0.0 if g is None else float(g.reshape(-1)[idx])
            ok = abs(an - fd) <= atol + rtol * max(abs(an), abs(fd))
            records.append({"analytic": an, "fd": fd, "ok": ok})
    n_ok = sum(r["ok"] for r in records)
    return {"records": records, "n_checked": len(records),
            "pass_fraction": n_ok / max(len(records), 1),
            "all_ok": n_ok == len(records)}
