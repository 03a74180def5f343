from pathlib import Path

import numpy as np
import pytest

from fbsdex.bsde import BasisKind
from fbsdex.config import (
    OutputFormat, build_problem, env_overrides, load_config, numerics_config, parse_config,
)
from fbsdex.endowment import EndowmentKind
from fbsdex.exceptions import ConfigValidationError
from fbsdex.fbsde import SolverKind
from fbsdex.utility import Family

CONFIGS = Path(__file__).parent.parent / 'configs'

BASE = '''
[market]
d1 = 1
theta = [0.2]

[utility]
family = "exponential"

[problem]
x0 = 1.0
'''


def _with(text: str) -> str:
    return BASE + text


class TestParseConfig:
    def test_defaults(self):
        config = parse_config(BASE)

        assert config.market.horizon == 1.0
        assert config.numerics_section().n_paths == 20_000
        assert config.problem.solver is SolverKind.AUTO
        assert config.output_section().directory == 'out'
        assert config.output_formats() == [OutputFormat.CSV, OutputFormat.JSON]

    def test_overrides(self):
        config = parse_config(BASE, {'numerics.n_paths': 100, 'market.horizon': 2.0})

        assert config.numerics.n_paths == 100
        assert config.market.horizon == 2.0

    def test_override_into_value_raises(self):
        with pytest.raises(ConfigValidationError) as e:
            parse_config(BASE, {'problem.x0.extra': 1})

        assert e.value.path == 'problem.x0.extra'

    def test_invalid_toml(self):
        with pytest.raises(ConfigValidationError):
            parse_config('[market\nd1 = 1')

    @pytest.mark.parametrize('text, path', [
        ('[numerics]\nn_paths = 1\n', 'numerics.n_paths'),
        ('[numerics]\nn_steps = "many"\n', 'numerics.n_steps'),
        ('[numerics]\nbasis = "fourier"\n', 'numerics.basis'),
        ('[numerics]\ndamping = 0.0\n', 'numerics.damping'),
        ('[output]\nformats = ["xml"]\n', 'output.formats[0]'),
        ('[extra]\nvalue = 1\n', 'extra'),
    ])
    def test_schema_errors(self, text, path):
        with pytest.raises(ConfigValidationError) as e:
            parse_config(_with(text))

        assert e.value.path == path

    def test_missing_section(self):
        with pytest.raises(ConfigValidationError) as e:
            parse_config('[market]\nd1 = 1\n[utility]\nfamily = "log"\n')

        assert e.value.path == 'problem'

    def test_theta_and_breakpoints_conflict(self):
        text = BASE + '\n[[market.theta_breakpoints]]\ntime = 0.0\nvalue = [0.1]\n'

        with pytest.raises(ConfigValidationError) as e:
            parse_config(text)

        assert e.value.path == 'market.theta_spec'


class TestEnvOverrides:
    def test_parses_literals(self):
        overrides = env_overrides({
            'FBSDEX_NUMERICS__N_PATHS': '1000',
            'FBSDEX_NUMERICS__Z': '4.5',
            'FBSDEX_OUTPUT__PRETTY': 'false',
            'FBSDEX_OUTPUT__DIRECTORY': 'results',
            'FBSDEX_MARKET__THETA': '[0.1, 0.2]',
            'HOME': '/root',
        })

        assert overrides == {
            'numerics.n_paths': 1000,
            'numerics.z': 4.5,
            'output.pretty': False,
            'output.directory': 'results',
            'market.theta': [0.1, 0.2],
        }

    @pytest.mark.parametrize('key', [
        'FBSDEX_SEED',
        'FBSDEX_NUMERICS__',
        'FBSDEX___SEED',
    ])
    def test_skips_malformed_keys(self, key):
        assert env_overrides({key: '1'}) == {}


class TestLoadConfig:
    def test_environment_then_explicit_overrides(self, tmp_path):
        path = tmp_path / 'run.toml'
        path.write_text(BASE)

        loaded = load_config(
            path,
            environ={'FBSDEX_NUMERICS__N_PATHS': '500', 'FBSDEX_NUMERICS__SEED': '7'},
            overrides={'numerics.n_paths': 300, 'numerics.n_steps': None},
        )

        assert loaded.config.numerics.n_paths == 300
        assert loaded.config.numerics.seed == 7
        assert loaded.config.numerics.n_steps == 64
        assert loaded.echo() == {
            'text': BASE,
            'overrides': {'numerics.n_paths': 300, 'numerics.seed': 7},
            'resolved': {
                'market': {'d1': 1, 'theta': [0.2]},
                'utility': {'family': 'exponential'},
                'problem': {'x0': 1.0},
                'numerics': {'n_paths': 300, 'seed': 7},
            },
        }

    def test_missing_file(self, tmp_path):
        path = tmp_path / 'missing.toml'

        with pytest.raises(ConfigValidationError) as e:
            load_config(path, environ={})

        assert e.value.path == str(path)

    @pytest.mark.parametrize('path', sorted(CONFIGS.glob('*.toml')), ids=lambda x: x.stem)
    def test_shipped_configs_build(self, path):
        spec, numerics, solver = build_problem(load_config(path, environ={}).config)

        assert spec.market.d == spec.market.d1 + spec.market.d2
        assert numerics.n_paths == 20_000
        assert solver is SolverKind.AUTO


class TestBuildProblem:
    def test_exponential(self):
        spec, numerics, _ = build_problem(parse_config(BASE))

        assert spec.utility.family is Family.EXPONENTIAL
        assert spec.utility.describe() == {'family': 'exponential', 'alpha': 1.0}
        assert spec.endowment.kind is EndowmentKind.NONE
        assert np.allclose(spec.market.theta_at(0.5), [0.2])

    def test_theta_defaults_to_zero(self):
        spec, _, _ = build_problem(parse_config('[market]\nd1 = 2\n[utility]\nfamily = "log"\n[problem]\nx0 = 1.0\n'))

        assert np.allclose(spec.market.theta_at(0.0), [0.0, 0.0])

    def test_theta_breakpoints(self):
        spec, _, _ = build_problem(load_config(CONFIGS / 'log.toml', environ={}).config)

        assert np.allclose(spec.market.theta_at(0.5), [0.15])

    def test_endowment(self):
        spec, numerics, _ = build_problem(load_config(CONFIGS / 'power_endowment.toml', environ={}).config)

        assert spec.endowment.kind is EndowmentKind.AFFINE_TANH
        assert spec.endowment.component == 1
        assert numerics.basis.degree == 2
        assert numerics.basis.kind is BasisKind.POLYNOMIAL

    def test_theta_length(self):
        with pytest.raises(ConfigValidationError) as e:
            build_problem(parse_config(BASE.replace('d1 = 1', 'd1 = 1\nd2 = 1')))

        assert e.value.path == 'market.theta'

    def test_breakpoint_length(self):
        text = '''
[market]
d1 = 2

[[market.theta_breakpoints]]
time = 0.0
value = [0.1, 0.1]

[[market.theta_breakpoints]]
time = 1.0
value = [0.2]

[utility]
family = "log"

[problem]
x0 = 1.0
'''
        with pytest.raises(ConfigValidationError) as e:
            build_problem(parse_config(text))

        assert e.value.path == 'market.theta_breakpoints[1].value'

    @pytest.mark.parametrize('utility, path', [
        ('family = "exponential"\ngamma = 0.5', 'utility.gamma'),
        ('family = "power"', 'utility.gamma'),
        ('family = "quadratic"', 'utility.b'),
        ('family = "log"\nalpha = 1.0', 'utility.alpha'),
        ('family = "custom"', 'utility.reference'),
        ('family = "custom"\nreference = "fbsdex.utility"', 'utility.reference'),
        ('family = "custom"\nreference = "fbsdex.missing_module:factory"', 'utility.reference'),
        ('family = "custom"\nreference = "fbsdex.utility:missing"', 'utility.reference'),
        ('family = "custom"\nreference = "fbsdex.endowment:Endowment"', 'utility.reference'),
    ])
    def test_utility_errors(self, utility, path):
        text = f'[market]\nd1 = 1\n[utility]\n{utility}\n[problem]\nx0 = 1.0\n'

        with pytest.raises(ConfigValidationError) as e:
            build_problem(parse_config(text))

        assert e.value.path == path

    def test_custom_reference(self):
        text = '[market]\nd1 = 1\n[utility]\nfamily = "custom"\nreference = "fbsdex.utility:log"\n[problem]\nx0 = 1.0\n'

        spec, _, _ = build_problem(parse_config(text))

        assert spec.utility.family is Family.LOG

    def test_mixture_defaults(self):
        spec, _, _ = build_problem(load_config(CONFIGS / 'mixture.toml', environ={}).config)

        assert spec.utility.describe() == {'family': 'mixture_exp', 'alpha1': 1.0, 'alpha2': 2.0}

    @pytest.mark.parametrize('text', [
        '[market]\nd1 = 1\n[utility]\nfamily = "log"\n[problem]\nx0 = 0.0\n',
        '[market]\nd1 = 1\n[utility]\nfamily = "log"\n[problem]\nx0 = 1.0\n'
        '[problem.endowment]\nkind = "linear"\nb = 1.0\n',
        '[market]\nd1 = 1\n[utility]\nfamily = "exponential"\n[problem]\nx0 = 1.0\n'
        '[problem.endowment]\nkind = "linear"\nb = 1.0\ncomponent = 3\n',
    ])
    def test_wrapped_problem_errors(self, text):
        with pytest.raises(ConfigValidationError) as e:
            build_problem(parse_config(text))

        assert e.value.path == 'problem'


def test_numerics_config():
    config = parse_config(_with('[numerics]\nn_steps = 8\nn_paths = 100\nbasis = "piecewise_linear"\nbins = 3\n'))

    numerics = numerics_config(config.numerics, threads=2)

    assert numerics.n_steps == 8
    assert numerics.n_paths == 100
    assert numerics.threads == 2
    assert numerics.basis.kind is BasisKind.PIECEWISE_LINEAR
    assert numerics.basis.bins == 3
