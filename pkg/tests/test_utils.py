import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from mobilesensors.utils import (
    ConfigError,
    DegenerateRankError,
    FormatError,
    InfeasiblePlanError,
    MobileSensorsError,
    NumericalError,
    atomic_write,
    derive_seed,
    dump_json,
    numerical_rank,
    sha256_file,
    symmetrize,
)


@pytest.mark.parametrize(
    'singular_values,expected',
    [
        ([3.0, 2.0, 1.0], 3),
        ([1.0, 1e-11], 1),
        ([1.0, 1e-9], 2),
        ([0.0, 0.0], 0),
        ([], 0),
    ],
)
def test_numerical_rank(singular_values, expected):
    assert numerical_rank(np.array(singular_values)) == expected


@given(st.integers(min_value=0, max_value=2 ** 31 - 1), st.text())
def test_derive_seed(seed, key):
    derived = derive_seed(seed, key)
    assert derived == derive_seed(seed, key)
    assert 0 <= derived < 2 ** 31


def test_derive_seed_depends_on_key():
    assert derive_seed(1, 'sensors=1') != derive_seed(1, 'sensors=2')


def test_symmetrize():
    matrix = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert np.array_equal(symmetrize(matrix), [[1.0, 1.0], [1.0, 1.0]])


def test_atomic_write_and_hash(tmp_path):
    path = tmp_path / 'nested' / 'file.txt'
    atomic_write(path, 'hello')
    assert path.read_text() == 'hello'
    assert sha256_file(path) == '2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824'
    atomic_write(path, b'bye')
    assert path.read_bytes() == b'bye'
    assert [p.name for p in path.parent.iterdir()] == ['file.txt']


def test_dump_json_is_stable():
    assert dump_json({'b': 1, 'a': [1.5]}) == json.dumps({'a': [1.5], 'b': 1}, indent=2) + '\n'


@pytest.mark.parametrize(
    'error,code',
    [
        (MobileSensorsError('x'), 1),
        (ConfigError('x'), 2),
        (FormatError('x', 12), 2),
        (DegenerateRankError('x', 3), 3),
        (InfeasiblePlanError('x'), 4),
    ],
)
def test_exit_codes(error, code):
    assert error.exit_code == code


def test_error_details():
    error = FormatError('bad magic', 0)
    assert error.offset == 0
    assert 'offset 0' in str(error)
    assert isinstance(DegenerateRankError('x', 2), NumericalError)
    assert DegenerateRankError('x', 2).achievable_rank == 2
