"""Desk-scale trained models shared by the slow tests (built once per session)."""
import time

from mri_instability.harness import pipeline
from mri_instability.harness.config import config_from_dict


class Desk:
    """Default desk config with the sampler shortened to 200 noise scales."""

    def __init__(self, root):
        self.cfg = config_from_dict({"models": {"diffusion": {"n_scales": 200}}})
        self.ws = pipeline.Workspace(self.cfg, root)
        self.timings = {}
        self._models = {}
        self._items = None
        t0 = time.perf_counter()
        pipeline.stage_phantom(self.ws)
        self.timings["phantom"] = time.perf_counter() - t0

    def model(self, name):
        if name not in self._models:
            t0 = time.perf_counter()
            if name in ("denoiser", "unrolled", "diffusion"):
                pipeline.stage_train(self.ws, [name])
            self._models[name] = pipeline.load_model(self.ws, name)
            self.timings[f"train_{name}"] = time.perf_counter() - t0
        return self._models[name]

    @property
    def items(self):
        """The 20 test phantoms with their seeded 8x measurements."""
        if self._items is None:
            self._items = pipeline.test_items(self.ws)
        return self._items

    def whitebox(self):
        """Default-grid white-box sweep on the denoiser: ``{eps: (perturbations, report, seconds)}``."""
        if not hasattr(self, "_whitebox"):
            from mri_instability.attack import transfer_evaluate, worst_case_perturb
            den = self.model("denoiser")
            meas = [m for _, m in self.items]
            sweep = {}
            for eps in self.cfg.attack.epsilons:
                t0 = time.perf_counter()
                acfg = pipeline._attack_cfg(self.cfg, eps)
                perts = worst_case_perturb(den, meas, acfg)
                rep = transfer_evaluate(den, [den], self.items, acfg, perturbations=perts,
                                        keep_recons=True)
                sweep[eps] = (perts, rep, time.perf_counter() - t0)
            self._whitebox = sweep
        return self._whitebox

    def transfer(self, eps):
        """Denoiser-crafted perturbations applied to the sampler, unrolled net and denoiser."""
        cache = self.__dict__.setdefault("_transfer", {})
        if eps not in cache:
            from mri_instability.attack import transfer_evaluate
            perts, _, attack_s = self.whitebox()[eps]
            targets = [self.model("diffusion"), self.model("unrolled"), self.model("denoiser")]
            t0 = time.perf_counter()
            rep = transfer_evaluate(self.model("denoiser"), targets, self.items,
                                    pipeline._attack_cfg(self.cfg, eps), perturbations=perts,
                                    keep_recons=True)
            cache[eps] = (rep, attack_s + time.perf_counter() - t0)
        return cache[eps]
