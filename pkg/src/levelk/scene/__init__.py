"""Scenario model, frames, routes, synthetic generation and storage."""
from .frame import denormalize, ego_frame, normalize, transform
from .generator import (GenConfig, GenerationError, first_collision, generate_corpus, generate_scenario,
                        kinematic_profile)
from .route import build_reference_route, fit_spline, route_arclength
from .types import Frame, Scenario, wrap_angle
from .io import (ScenarioFormatError, content_hash, deserialize, read_corpus, serialize,
                 write_corpus)
