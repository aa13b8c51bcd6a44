"""Scratch: full-loss gradient audit per variant (throwaway)."""
import numpy as np

from clora.adapters import AdapterConfig, Variant
from clora.model import AdaptedModel, Backbone, forward
from clora.numerics import RealMatrix, SeededRng, check_gradients
from clora.training import BatchNoise, ExampleNoise, TrainConfig, elbo_terms


def random_backbone(d_in, d, layers, rng):
    emb = RealMatrix(rng.split("emb").normal(d, d_in) * 0.5)
    ws = [RealMatrix(rng.split(f"w{i}").normal(d, d) * 0.4) for i in range(layers)]
    return Backbone(emb=emb, layers=ws, source_accuracy=1.0)


def randomize_trainables(model, rng, scale=0.35):
    for name, value in model.named_params().items():
        r = rng.split(name)
        model.set_param(name, RealMatrix(value.a + scale * r.normal(*value.shape)))


def audit(variant, seed, d_in=5, d=8, r=2, layers=2, c=8, k=3, n_batch=2, h=1e-5, tol=1e-4):
    rng = SeededRng(seed)
    backbone = random_backbone(d_in, d, layers, rng.split("bb"))
    cfg = AdapterConfig(d=d, r=r, alpha=float(r), hidden_c=c, variant=variant)
    model = AdaptedModel.init(backbone, cfg, k, rng.split("init"))
    randomize_trainables(model, rng.split("perturb"))

    xs = rng.split("x").normal(n_batch, d_in)
    ys = rng.split("y").integers(0, k, n_batch)
    config = TrainConfig(kl_scale=0.37, sigma_p=0.8, iters=10, eval_every=10)

    # frozen noise, sample mode
    per_example = []
    for i in range(n_batch):
        ex_rng = rng.split(f"noise{i}")
        per_example.append(ExampleNoise(layer_eps=model.draw_layer_eps(ex_rng)))
    noise = BatchNoise(mode="sample", per_example=per_example)

    names = sorted(model.named_params())

    def loss_fn(params):
        for name, p in zip(names, params):
            model.set_param(name, p)
        elbo = elbo_terms(model, xs, ys, noise, config, n_train=100, kl_into_theta=True)
        grads = []
        for name in names:
            g = elbo.grads_nll.get_or_zero(name, model.get_param(name).shape)
            g = g + elbo.grads_kl.get_or_zero(name, model.get_param(name).shape)
            grads.append(RealMatrix(g))
        return elbo.loss, grads

    params = [model.get_param(n) for n in names]
    report = check_gradients(loss_fn, params, h=h, tol=tol, param_names=names)
    print(f"{variant.value:6s} seed={seed}: max_rel={report.max_rel_error:.3e} passed={report.passed}")
    if not report.passed:
        print(report)
    return report.passed


if __name__ == "__main__":
    ok = True
    for variant in Variant:
        for seed in (1, 2, 3):
            ok &= audit(variant, seed)
    print("ALL PASS" if ok else "FAILURES")
