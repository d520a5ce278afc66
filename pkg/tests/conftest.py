from pathlib import Path

import pytest

from walkguide.hplanner import HierarchicalResponse, render_structured_response

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def walk_reply(instruction="keep walking straight, the path is clear", **kw) -> str:
    fields = dict(location="foot path", weather="sunny", traffic="low", scene="a quiet foot path", instruction=instruction)
    fields.update(kw)
    return render_structured_response(HierarchicalResponse(**fields))


@pytest.fixture
def sample_annotation_text():
    return (FIXTURES / "sample_annotation.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def stream_dir(tmp_path_factory):
    """A 60-frame synthetic stream with detections, shared read-only across tests."""
    from walkguide.synthetic import synthetic_stream

    root = tmp_path_factory.mktemp("stream")
    synthetic_stream(root / "frames", 60, detections_path=root / "dets.jsonl")
    return root
