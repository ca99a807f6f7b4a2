import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _double_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)
