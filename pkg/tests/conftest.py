import numpy as np
import pytest

from cvlm import fixtures, modelio
from cvlm import tokenizer as tok
from cvlm.tensor import Tensor


@pytest.fixture(scope="session")
def toy_bundle(tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle")
    return fixtures.write_toy_bundle(str(d), seed=0)


@pytest.fixture(scope="session")
def toy_manifest(toy_bundle):
    return modelio.load_manifest(toy_bundle["manifest"])


@pytest.fixture(scope="session")
def toy_weights(toy_bundle, toy_manifest):
    return modelio.load_archive(toy_bundle["weights"], toy_manifest)


@pytest.fixture(scope="session")
def toy_vocab(toy_manifest):
    t = toy_manifest.tokenizer
    return tok.load_vocab(t.vocab_path, t.merges_path, t.specials)


def clone_weights(weights):
    return {name: Tensor(t.data.copy()) for name, t in weights.items()}


def random_text(rng: np.random.Generator, max_len: int = 40) -> str:
    """Random UTF-8 text avoiding surrogates and the special literals."""
    n = int(rng.integers(0, max_len))
    chars = []
    for _ in range(n):
        cp = int(rng.integers(1, 0x2FFF))
        if 0xD800 <= cp <= 0xDFFF:
            cp = 0x20
        chars.append(chr(cp))
    return "".join(chars).replace("<image>", " ").replace("<|endoftext|>", " ")
