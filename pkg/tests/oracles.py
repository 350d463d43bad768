"""Independent reference computations shared by several test modules."""
import numpy as np

from delaysnn.trainer import backward_pass, forward_pass, loss


def moran_bruteforce(grid):
    """Double loop over all cell pairs with binary queen weights."""
    grid = np.asarray(grid, dtype=float)
    rows, cols = grid.shape
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    x = np.array([grid[r, c] for r, c in cells])
    mean = x.mean()
    num = 0.0
    w_sum = 0.0
    for a, (ra, ca) in enumerate(cells):
        for b, (rb, cb) in enumerate(cells):
            if a != b and max(abs(ra - rb), abs(ca - cb)) == 1:
                num += (x[a] - mean) * (x[b] - mean)
                w_sum += 1.0
    den = np.sum((x - mean) ** 2)
    return len(cells) / w_sum * num / den


def _params(net):
    for li, layer in enumerate(net.layers):
        yield f"theta{li + 1}", li, layer.sparse.theta
        yield f"delay{li + 1}", li, layer.delay


def gradient_check(net, x, labels, frozen: bool, step: float = 1e-5):
    """Compare the analytic gradient against central differences.

    ``frozen``: the hidden raster from the unperturbed pass is injected into
    every perturbed pass. Otherwise perturbations that change the raster are
    skipped and counted. Returns (max_rel_err, n_checked, n_excluded, n_nonzero).
    """
    logits, cache = forward_pass(x, net, training=True)
    base_raster = cache.trace1.s_seq.copy()
    grads = backward_pass(cache, labels, net, surrogate=False)
    analytic = {"theta1": grads.theta[0], "theta2": grads.theta[1],
                "delay1": grads.delay[0], "delay2": grads.delay[1]}
    inject = base_raster if frozen else None

    def evaluate():
        lg, c = forward_pass(x, net, training=True, hidden_spikes=inject)
        return loss(lg, labels, net), c.trace1.s_seq

    worst, checked, excluded, nonzero = 0.0, 0, 0, 0
    for name, _, arr in _params(net):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up, raster_up = evaluate()
            arr[idx] = orig - step
            dn, raster_dn = evaluate()
            arr[idx] = orig
            if not frozen and (not np.array_equal(raster_up, base_raster)
                               or not np.array_equal(raster_dn, base_raster)):
                excluded += 1
                continue
            numeric = (up - dn) / (2 * step)
            a = analytic[name][idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            checked += 1
            nonzero += abs(numeric) > 1e-6
    return worst, checked, excluded, nonzero
