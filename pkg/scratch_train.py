"""Scratch: end-to-end mini experiment timing (throwaway)."""
import time

import numpy as np

from clora.adapters import AdapterConfig, Variant
from clora.datasets import DatasetSpec, generate_dataset
from clora.model import AdaptedModel, BackboneConfig, pretrain_backbone
from clora.numerics import SeededRng
from clora.training import TrainConfig, TrainData, train
from clora import evaluation

spec = DatasetSpec()
bundle = generate_dataset(spec, SeededRng(0).split("dataset"))
print("bayes accuracy:", bundle.bayes_accuracy)
print("train/val/test:", len(bundle.train_x), len(bundle.val_x), len(bundle.test_x))

t0 = time.time()
bb_cfg = BackboneConfig()
backbone = pretrain_backbone(bb_cfg, bundle.source_x, bundle.source_y, SeededRng(0).split("backbone"))
print(f"backbone: acc={backbone.source_accuracy:.4f} in {time.time()-t0:.1f}s")

for method, variant, dropout, m_eval in [
    ("map", Variant.MAP, 0.0, 0),
    ("clora", Variant.CLORA, 0.0, 10),
]:
    t0 = time.time()
    cfg = AdapterConfig(d=bb_cfg.d, variant=variant, dropout=dropout)
    model = AdaptedModel.init(backbone, cfg, spec.k, SeededRng(1).split("init"))
    tc = TrainConfig(lr_main=1e-4, iters=300, eval_every=100)
    state = train(model, TrainData(bundle.train_x, bundle.train_y, bundle.val_x, bundle.val_y), tc, SeededRng(1).split("train"))
    dt = time.time() - t0
    rep = evaluation.evaluate(model, (bundle.test_x, bundle.test_y), m_eval, 15, None, SeededRng(9).split("ev"))
    print(f"{method}: {dt:.1f}s for 300 iters  best_step={state.best_step} "
          f"val_acc={state.best_acc:.3f} val_ece={state.best_ece:.3f} | "
          f"test acc={rep.acc:.3f} ece={rep.ece:.3f} nll={rep.nll:.3f}")
