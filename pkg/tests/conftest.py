import pytest

from urbanvitality.synth import SynthSpec, generate_city


@pytest.fixture(scope="session")
def small_city(tmp_path_factory):
    """One 12x12-block city (16 districts) shared by read-only tests."""
    spec = SynthSpec(
        seed=42,
        grid_rows=12,
        grid_cols=12,
        district_k=3,
        station_count=30,
        planted_betas={"intersection_density": 0.4, "employment_density": 0.4,
                       "third_places": 0.3, "closeness_highways": -0.35},
        noise_sd=0.1,
    )
    outdir = tmp_path_factory.mktemp("small_city")
    return generate_city(spec, outdir)
