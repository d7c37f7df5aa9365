"""Trained artefacts needed at inference time, and their on-disk layout.

A bundle directory holds ``encoder.cnmd``, ``submodel_<k>.cnmd`` for
k = 1..K and ``bundle.cfg`` (flat key=value partition settings).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import partitioner as pt
from . import sinfovae as sv
from .config import read_config, write_config
from .protocol import deserialize_tensors, serialize_tensors
from .submodels import SubmodelParams, predictive_entropy, submodel_forward
from .utils import atomic_write_bytes


@dataclass
class Bundle:
    encoder: dict
    submodels: list
    partition: pt.PartitionConfig
    classes: np.ndarray

    @property
    def K(self):
        return len(self.submodels)

    def latent(self, X):
        return sv.latent_means(self.encoder, X)[1]

    def select(self, X):
        return pt.select_submodel(pt.soft_codes_from_latent(self.latent(X), self.partition))

    def infer(self, frame):
        """Edge path for one frame: ``(label_index, partition, probs)``."""
        frame = np.asarray(frame, np.float32)
        k = int(self.select(frame[None, :])[0])
        probs = submodel_forward(frame, self.submodels[k - 1])
        return int(np.argmax(probs)), k, probs

    def predict(self, X):
        sel = self.select(X)
        out = np.empty(len(X), dtype=np.int64)
        for k in np.unique(sel):
            rows = sel == k
            out[rows] = np.argmax(submodel_forward(X[rows], self.submodels[k - 1]), axis=1)
        return out

    def entropies(self, X):
        return np.stack([predictive_entropy(submodel_forward(X, m)) for m in self.submodels], axis=1)


def save_bundle(bundle: Bundle, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(d / "encoder.cnmd",
                       serialize_tensors([bundle.encoder[k] for k in sv.ENCODER_NAMES]))
    for k, sm in enumerate(bundle.submodels, start=1):
        atomic_write_bytes(d / f"submodel_{k}.cnmd", serialize_tensors(sm.tensors()))
    p = bundle.partition
    write_config(d / "bundle.cfg", {
        "K": p.K, "tau": p.tau, "gamma": p.gamma, "alpha_mix": p.alpha_mix,
        "epsilon_std": p.epsilon_std,
        "classes": ",".join(str(c) for c in bundle.classes),
    })


def load_bundle(directory) -> Bundle:
    d = Path(directory)
    cfg = read_config(d / "bundle.cfg")
    K = int(cfg["K"])
    part = pt.PartitionConfig(K=K, tau=float(cfg["tau"]), gamma=float(cfg["gamma"]),
                              alpha_mix=float(cfg["alpha_mix"]),
                              epsilon_std=float(cfg["epsilon_std"]))
    enc = deserialize_tensors((d / "encoder.cnmd").read_bytes())
    if len(enc) != len(sv.ENCODER_NAMES):
        raise ValueError("encoder blob has the wrong number of tensors")
    subs = [SubmodelParams.from_tensors(deserialize_tensors((d / f"submodel_{k}.cnmd").read_bytes()))
            for k in range(1, K + 1)]
    classes = np.array([int(c) for c in cfg["classes"].split(",")])
    return Bundle(dict(zip(sv.ENCODER_NAMES, enc)), subs, part, classes)
