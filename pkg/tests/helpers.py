from pagedkv.memory import PagedMemory
from pagedkv.model import ModelConfig, TinyModel

SMALL = ModelConfig(max_seq_len=256, weight_seed=3)


def small_model(cfg=SMALL):
    return TinyModel(cfg)


def paged(model, blocks=512, B=4, **kw):
    return PagedMemory(model.config, blocks, B, **kw)
