import numpy as np

from knnvc.t2v import EnrollmentBag, forward_batch, init_model, batch_loss

SMALL = dict(in_dim=6, hidden_dims=(10, 7, 8), num_heads=2)


def small_problem(seed, batch=5, speakers=4, **shape):
    shape = {**SMALL, **shape}
    rng = np.random.default_rng(seed + 1000)
    model = init_model(seed, **shape)
    x = rng.standard_normal((batch, shape["in_dim"]))
    bag = EnrollmentBag(tuple(f"s{i}" for i in range(speakers)),
                        rng.standard_normal((speakers, shape["hidden_dims"][-1])))
    targets = rng.integers(0, speakers, batch)
    return model, x, bag, targets


def _pre_signs(model, x, bag):
    _, cache = forward_batch(model, x, bag)
    return [np.sign(layer["pre"]) for layer in cache["layers"]]


def finite_difference_check(model, x, bag, targets, analytic, coords_per_group=None, h=1e-4, rng=None):
    """Central differences against ``analytic`` gradients.

    Returns ``(worst relative error per group, number of coordinates skipped)``.
    Coordinates whose perturbation moves any LeakyReLU pre-activation across
    zero are skipped: the loss is not differentiable across the kink, so a
    central difference there measures the kink, not the gradient.
    """
    rng = rng or np.random.default_rng(0)
    worst, skipped = {}, 0
    for name, theta in model.params.items():
        flat = theta.reshape(-1)
        if coords_per_group is None or coords_per_group >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, coords_per_group, replace=False)
        errs = []
        for c in coords:
            plus, minus = dict(model.params), dict(model.params)
            plus[name], minus[name] = theta.copy(), theta.copy()
            plus[name].reshape(-1)[c] += h
            minus[name].reshape(-1)[c] -= h
            mp, mm = model.with_params(plus), model.with_params(minus)
            if any((a != b).any() for a, b in zip(_pre_signs(mp, x, bag), _pre_signs(mm, x, bag))):
                skipped += 1
                continue
            num = (batch_loss(mp, x, targets, bag) - batch_loss(mm, x, targets, bag)) / (2 * h)
            ana = analytic[name].reshape(-1)[c]
            errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-6))
        worst[name] = max(errs) if errs else 0.0
    return worst, skipped
