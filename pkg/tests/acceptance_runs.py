"""Long training runs behind the acceptance criteria, cached on disk.

A result is keyed by the run parameters and the package code fingerprint, so
any source change retrains.  Set DCOR_ACCEPTANCE_CACHE to move the cache.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import torch

from dcor_subspaces import cli, gan, metrics
from dcor_subspaces import encoder as enc
from dcor_subspaces import synthdata as sd
from dcor_subspaces.layout import SubspaceLayout

CACHE = Path(os.environ.get("DCOR_ACCEPTANCE_CACHE", Path(__file__).resolve().parent.parent / ".acceptance_cache"))

ENCODER_LAYOUT = SubspaceLayout(("attribute", "camera"), (4, 12), {"attribute": 3, "camera": 5})
GAN_LAYOUT = SubspaceLayout(("attribute", "camera", "identity"), (4, 12, 16), {"attribute": 3, "camera": 5})
N_IMAGES = 6000
CORRELATION = 0.7
ENCODER_EPOCHS = 30
GAN_STEPS = 3000
GAN_WIDTHS = dict(base_channels=16, max_channels=32)
FFD_SAMPLES = 1000


def _key(name: str, params: dict) -> str:
    blob = json.dumps({"name": name, "params": params, "code": cli.code_fingerprint()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached(name: str, params: dict, fn):
    """fn(artifact_dir) -> JSON-able dict; reused while parameters and code are unchanged."""
    directory = CACHE / f"{name}-{_key(name, params)}"
    result_file = directory / "result.json"
    if result_file.exists():
        return json.loads(result_file.read_text())
    directory.mkdir(parents=True, exist_ok=True)
    start = time.process_time()
    result = fn(directory)
    result["cpu_seconds"] = time.process_time() - start
    result["params"] = params
    result_file.write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def confounded_splits(seed: int) -> dict:
    batch = sd.sample_dataset(N_IMAGES, sd.ConfoundSpec(CORRELATION), 32, seed=100 + seed)
    return sd.split_by_identity(batch, seed=seed)


def encoder_run(lambda_dc: float, seed: int) -> dict:
    params = {"lambda_dc": lambda_dc, "seed": seed, "n": N_IMAGES, "correlation": CORRELATION,
              "epochs": ENCODER_EPOCHS}

    def run(directory):
        torch.set_num_threads(1)
        splits = confounded_splits(seed)
        trained = enc.train_encoder(splits, ENCODER_LAYOUT, enc.EncoderTrainConfig(
            lambda_dc=lambda_dc, epochs=ENCODER_EPOCHS, seed=seed))
        enc.save_encoder(trained, directory / "encoder.pt")
        train, test = splits["train"], splits["test"]
        emb_train = ENCODER_LAYOUT.as_dict(enc.encode(trained.model, train.images))
        emb_test = ENCODER_LAYOUT.as_dict(enc.encode(trained.model, test.images))
        report = metrics.knn_confusion(emb_train, train.labels, emb_test, test.labels)
        dcor = metrics.pairwise_dcor_report(emb_test)
        return {"confusion": report.confusion, "chance": report.chance, "accuracy": report.accuracy,
                "test_dcor": float(dcor[0, 1]), "best_epoch": trained.best_epoch}

    return cached("encoder", params, run)


def _moving(log, key, steps):
    values = [r[key] for r in log if r["inversion"] and r["step"] in steps]
    return float(np.mean(values))


def gan_run(lambda_dc: float, seed: int) -> dict:
    params = {"lambda_dc": lambda_dc, "seed": seed, "n": N_IMAGES, "correlation": CORRELATION,
              "steps": GAN_STEPS, **GAN_WIDTHS}

    def run(directory):
        torch.set_num_threads(1)
        splits = confounded_splits(seed)
        bundle = gan.build_gan(GAN_LAYOUT, 32, gan.GanTrainConfig(lambda_dc=lambda_dc, seed=seed, **GAN_WIDTHS))
        real = splits["test"].images[:FFD_SAMPLES]
        extractor = metrics.RandomConvExtractor(0)

        def ffd():
            w = gan.sample_latent(bundle.generator, FFD_SAMPLES, seed=10_000 + seed).w
            fake = (gan.generate_batched(bundle.generator, w, noise_seed=seed) + 1) / 2
            return metrics.frechet_feature_distance(real, fake.numpy(), extractor).value

        ffd_init = ffd()
        gan.train_gan(bundle, splits["train"], GAN_STEPS)
        gan.save_gan(bundle, directory / "gan.pt")
        parts = gan.encode_image(bundle.discriminator, GAN_LAYOUT, splits["test"].images).parts()
        dcor = metrics.pairwise_dcor_report({k: v.numpy() for k, v in parts.items()})
        early, late = range(100), range(GAN_STEPS - 250, GAN_STEPS)
        return {
            "ffd_init": ffd_init, "ffd_final": ffd(),
            "lw_early": _moving(bundle.log, "g_lw", early), "lw_final": _moving(bundle.log, "g_lw", late),
            "lp_early": _moving(bundle.log, "g_lp", early), "lp_final": _moving(bundle.log, "g_lp", late),
            "test_dcor": float(dcor[np.triu_indices(3, 1)].mean()), "test_dcor_matrix": dcor.tolist(),
            "inversion_fraction": gan.inversion_fraction(bundle.log), "checkpoint": str(directory / "gan.pt"),
        }

    return cached("gan", params, run)


def swap_eval_run(lambda_dc: float = 0.2, seed: int = 0, factor: str = "attribute") -> dict:
    source = gan_run(lambda_dc, seed)
    params = {"gan": source["params"], "factor": factor}

    def run(directory):
        torch.set_num_threads(1)
        splits = confounded_splits(seed)
        bundle = gan.load_gan(source["checkpoint"])
        report = metrics.swap_classifier_eval(bundle, splits["train"], splits["test"], factor)
        (directory / "swap_eval.json").write_text(report.to_json())
        return report.to_dict()

    return cached("swap_eval", params, run)


if __name__ == "__main__":
    import sys

    kind, lam, seed = sys.argv[1], float(sys.argv[2]), int(sys.argv[3])
    fn = {"encoder": encoder_run, "gan": gan_run, "swap": swap_eval_run}[kind]
    print(json.dumps(fn(lam, seed), indent=2, sort_keys=True))
