from cpnet import engine as E
from cpnet.engine import Graph, Tensor


def param_grad_errors(module, loss_fn, eps=1e-6, prefixes=None):
    """{name: max relative error} of backward vs central differences per parameter."""
    with Graph() as g:
        loss = loss_fn()
    g.backward(loss)
    errors = {}
    for name, p in module.named_parameters():
        if prefixes and not name.startswith(prefixes):
            continue
        analytic, orig = p.grad.copy(), p.data

        def f(t, p=p, orig=orig):
            p.data = t.data
            try:
                return loss_fn()
            finally:
                p.data = orig

        errors[name] = E.max_relative_error(analytic, E.finite_diff_grad(f, Tensor(orig), eps))
    return errors
