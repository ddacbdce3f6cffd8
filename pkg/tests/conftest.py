import pytest

from tendonheal.phantom import generate_exams


@pytest.fixture(scope="session")
def small_exams():
    """Three patients and three volunteers, both planes, three slices per exam."""
    return generate_exams(3, 3, slices_per_exam=3, master_seed=5)
