"""Small model builders shared by the training tests."""

from dataclasses import dataclass

import numpy as np

from metainstruct.hypernet import HNetConfig, HyperNetwork
from metainstruct.metatrain import TrainConfig, prepare_tasks
from metainstruct.seq2seq import ModelConfig, Seq2SeqLM
from metainstruct.synth import synth_suite
from metainstruct.taskdata import prefilter_instances


@dataclass(frozen=True)
class MicroTokenizer:
    """17 letters plus PAD/BOS/EOS: a 20-symbol vocabulary."""

    LETTERS = "abcdefghijklmnop "
    PAD = 17
    BOS = 18
    EOS = 19
    n_index_tokens = 0
    vocab_size = 20

    def encode(self, text):
        return [self.LETTERS.index(c) for c in text]

    def decode(self, ids):
        return "".join(self.LETTERS[i] for i in ids if i < 17)

    def count(self, text):
        return len(text)


def micro_config(d=8, vocab=None, enc=48, dec=24):
    from metainstruct.tokenizer import ByteTokenizer
    return ModelConfig(vocab_size=vocab or ByteTokenizer().vocab_size, d_model=d, n_heads=2,
                       n_encoder_layers=1, n_decoder_layers=1, ff_dim=2 * d,
                       max_encoder_positions=enc, max_decoder_positions=dec)


def suite_setup(method, n_tasks=6, instances=20, d=16, seed=0, dtype=np.float32, hidden=8, **train_kw):
    """Model, merged params, hypernet (or None) and prepared train tasks on a tiny synthetic suite."""
    cfg = micro_config(d=d, enc=192, dec=40)
    tasks = prefilter_instances(synth_suite(seed, n_tasks, instances, min_len=4, max_len=6),
                                enc_limit=cfg.max_encoder_positions, dec_limit=cfg.max_decoder_positions)
    train_kw.setdefault("batch_size", 5)
    tcfg = TrainConfig(method=method, seed=seed, **train_kw)
    model = Seq2SeqLM(cfg)
    rng = np.random.default_rng(seed)
    params = model.init_params(rng, dtype)
    hnet = None
    if method in ("hnet", "hnet_maml"):
        hnet = HyperNetwork(cfg, HNetConfig(hidden_dim=hidden))
        params = params.merged(hnet.init_params(rng, dtype))
    return model, params, hnet, prepare_tasks(tasks, tcfg), tcfg
