"""Scratch: find the lr where MAP memorizes before the first checkpoint (throwaway)."""
import numpy as np

from clora.adapters import AdapterConfig, Variant
from clora.datasets import DatasetSpec, generate_dataset
from clora.model import AdaptedModel, BackboneConfig, pretrain_backbone
from clora.numerics import SeededRng
from clora.training import TrainConfig, TrainData, train
from clora import evaluation

spec = DatasetSpec()
bundle = generate_dataset(spec, SeededRng(0).split("dataset"))
bb_cfg = BackboneConfig()
backbone = pretrain_backbone(bb_cfg, bundle.source_x, bundle.source_y, SeededRng(0).split("backbone"))
data = TrainData(bundle.train_x, bundle.train_y, bundle.val_x, bundle.val_y)


def train_fit_nll(model):
    """NLL on the training split at the mean (memorization probe)."""
    rep = evaluation.evaluate(model, (bundle.train_x, bundle.train_y), 0, 15, None, None)
    return rep.nll, rep.acc


for lr in (3e-3, 1e-2, 3e-2):
    accs, eces, nlls, fits = [], [], [], []
    for seed in (0, 1, 2):
        cfg = AdapterConfig(d=bb_cfg.d, variant=Variant.MAP)
        model = AdaptedModel.init(backbone, cfg, spec.k, SeededRng(seed).split("init"))
        tc = TrainConfig(lr_main=lr, iters=1500, eval_every=100)
        state = train(model, data, tc, SeededRng(seed).split("train"))
        rep = evaluation.evaluate(model, (bundle.test_x, bundle.test_y), 0, 15, None, None)
        fit_nll, fit_acc = train_fit_nll(model)
        accs.append(rep.acc); eces.append(rep.ece); nlls.append(rep.nll)
        fits.append((fit_nll, fit_acc, state.best_step))
    print(f"map lr={lr:<6g} acc={np.mean(accs):.3f} ece={np.mean(eces):.3f} "
          f"nll={np.mean(nlls):.3f} | checkpoint fit: "
          + " ".join(f"(trainNLL={f:.2f},trainACC={a:.2f},step={s})" for f, a, s in fits))
