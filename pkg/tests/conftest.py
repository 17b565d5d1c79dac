import numpy as np
import pytest

from herdkit.body_model import KinematicTree, TemplateConfig, TemplateModel, make_toy_template


@pytest.fixture(scope="session")
def desk_template():
    return make_toy_template(TemplateConfig())


@pytest.fixture(scope="session")
def small_template():
    return make_toy_template(TemplateConfig(n_betas=4, n_joints=9, n_keypoints=8, n_verts=102, seed=3))


def tetra_template(parent_of=(-1,), weights=None, joint_rows=None):
    """Hand-built tetrahedron template with explicit skinning."""
    verts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    J = len(parent_of)
    if weights is None:
        weights = np.zeros((4, J))
        weights[:, 0] = 1.0
    if joint_rows is None:
        joint_rows = np.full((J, 4), 0.25)
    return TemplateModel(
        template_vertices=verts,
        faces=faces,
        shape_basis=np.stack([np.eye(4, 3), np.ones((4, 3))]),
        skin_weights=np.asarray(weights, dtype=float),
        joint_regressor=np.asarray(joint_rows, dtype=float),
        keypoint_regressor=np.array([[1.0, 0, 0, 0], [0, 0.5, 0.5, 0]]),
        tree=KinematicTree(tuple(parent_of)),
    )


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
