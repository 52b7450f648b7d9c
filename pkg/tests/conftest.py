import numpy as np
import pytest

from paperdoll import corpus
from paperdoll.corpus import Record


def records_from_seeds(seeds, spec=None, weights=None):
    out = []
    for s in seeds:
        smp = corpus.gen_sample(s, spec=spec, weights=weights)
        out.append(Record(sid=f"r{s}", split="train", pose=smp.pose, parsing=smp.parsing,
                          attrs=smp.attrs, image=smp.image.astype(np.float32)))
    return out


@pytest.fixture(scope="session")
def tiny_records():
    return records_from_seeds(range(24))


@pytest.fixture(scope="session")
def untrained_checkpoints(tmp_path_factory):
    """Randomly initialized but loadable checkpoints (API-contract tests)."""
    from paperdoll import indexnet, parsing, pipeline, predictor, sampler, vq

    d = tmp_path_factory.mktemp("ckpt")
    rng = np.random.default_rng(0)
    parsing.PoseParsingNet(rng).save(d / pipeline.CHECKPOINT_FILES["stage1"])
    vq_model = vq.HierVq(rng)
    vq_model.top_frozen = True
    vq_model.save(d / pipeline.CHECKPOINT_FILES["vq_top"])
    vq_model.save(d / pipeline.CHECKPOINT_FILES["vq"])
    sampler.MoeSampler(rng).save(d / pipeline.CHECKPOINT_FILES["sampler"])
    ff = indexnet.IndexPredictor(rng)
    ff.trained = True
    ff.save(d / pipeline.CHECKPOINT_FILES["indexnet"])
    ar = indexnet.ArFineSampler(rng)
    ar.trained = True
    ar.save(d / pipeline.CHECKPOINT_FILES["ar_baseline"])
    pred = predictor.TexturePredictor(rng)
    pred.trained = True
    pred.save(d / pipeline.CHECKPOINT_FILES["predictor"])
    return d
