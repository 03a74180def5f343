import enum
import importlib
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from fbsdex.bsde import BasisKind, RegressionBasis
from fbsdex.constants import (
    DAMPING, DEFAULT_BINS, DEFAULT_DEGREE, DEFAULT_Z, DOMAIN_CLIP, FIXED_POINT_MAX_ITERATIONS,
    FIXED_POINT_TOLERANCE, MAX_DEGREE, MAX_SEED, MERTON_RTOL, MIN_SEED, PICARD_MAX_ITERATIONS, PICARD_TOLERANCE,
)
from fbsdex.endowment import Endowment, EndowmentKind
from fbsdex.exceptions import ConfigValidationError, FbsdexError
from fbsdex.fbsde import NumericsConfig, ProblemSpec, SolverKind
from fbsdex.market import MarketModel, build_market, piecewise_linear_theta
from fbsdex.schema import Bool, EnumField, Float, Int, Repeated, Section, SectionField, String, one_of
from fbsdex import utility
from fbsdex.utility import Family, UtilityModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    'ENV_PREFIX',
    'OutputFormat',
    'ThetaBreakpoint',
    'MarketSection',
    'UtilitySection',
    'EndowmentSection',
    'ProblemSection',
    'NumericsSection',
    'OutputSection',
    'RunConfig',
    'LoadedConfig',
    'parse_config',
    'load_config',
    'env_overrides',
    'numerics_config',
    'build_problem',
]

logger = logging.getLogger(__name__)

ENV_PREFIX = 'FBSDEX_'


class OutputFormat(enum.Enum):
    CSV = 'csv'
    JSON = 'json'
    CACHE = 'cache'


class ThetaBreakpoint(Section):
    time = Float(min_value=0.0, required=True)
    value = Repeated(Float(), min_length=1, required=True)


class MarketSection(Section):
    d1 = Int(min_value=1, default=1)
    d2 = Int(min_value=0, default=0)
    horizon = Float(min_value=0.0, exclusive_min=True, default=1.0)

    theta = Repeated(Float(), min_length=1)
    theta_breakpoints = Repeated(SectionField(ThetaBreakpoint), min_length=1)
    theta_spec = one_of(
        'theta',
        'theta_breakpoints',
    )


class UtilitySection(Section):
    family = EnumField(Family, required=True)
    alpha = Float(min_value=0.0, exclusive_min=True)
    gamma = Float(max_value=1.0, exclusive_max=True)
    b = Float(min_value=0.0, exclusive_min=True)
    alpha1 = Float(min_value=0.0, exclusive_min=True)
    alpha2 = Float(min_value=0.0, exclusive_min=True)
    gamma1 = Float(min_value=0.0, max_value=1.0, exclusive_min=True, exclusive_max=True)
    gamma2 = Float(min_value=0.0, max_value=1.0, exclusive_min=True, exclusive_max=True)
    reference = String()


class EndowmentSection(Section):
    kind = EnumField(EndowmentKind, default=EndowmentKind.NONE)
    component = Int(min_value=0, default=0)
    a = Float(default=0.0)
    b = Float(default=0.0)
    c = Float(default=1.0)
    strike = Float(default=0.0)
    cap = Float(min_value=0.0)


class ProblemSection(Section):
    x0 = Float(required=True)
    endowment = SectionField(EndowmentSection)
    solver = EnumField(SolverKind, default=SolverKind.AUTO)


class NumericsSection(Section):
    n_steps = Int(min_value=1, default=64)
    n_paths = Int(min_value=2, default=20_000)
    seed = Int(min_value=MIN_SEED, max_value=MAX_SEED, default=0)
    basis = EnumField(BasisKind, default=BasisKind.POLYNOMIAL)
    degree = Int(min_value=0, max_value=MAX_DEGREE, default=DEFAULT_DEGREE)
    bins = Int(min_value=1, default=DEFAULT_BINS)
    fixed_point_tolerance = Float(min_value=0.0, exclusive_min=True, default=FIXED_POINT_TOLERANCE)
    fixed_point_max_iterations = Int(min_value=1, default=FIXED_POINT_MAX_ITERATIONS)
    damping = Float(min_value=0.0, max_value=1.0, exclusive_min=True, default=DAMPING)
    picard_max_iterations = Int(min_value=1, default=PICARD_MAX_ITERATIONS)
    picard_tolerance = Float(min_value=0.0, exclusive_min=True, default=PICARD_TOLERANCE)
    domain_clip = Float(min_value=0.0, exclusive_min=True, default=DOMAIN_CLIP)
    z = Float(min_value=0.0, exclusive_min=True, default=DEFAULT_Z)
    merton_tolerance = Float(min_value=0.0, exclusive_min=True, default=MERTON_RTOL)


class OutputSection(Section):
    directory = String(default='out')
    formats = Repeated(EnumField(OutputFormat), min_length=1)
    trace_paths = Int(min_value=0, default=5)
    pretty = Bool(default=True)


class RunConfig(Section):
    market = SectionField(MarketSection, required=True)
    utility = SectionField(UtilitySection, required=True)
    problem = SectionField(ProblemSection, required=True)
    numerics = SectionField(NumericsSection)
    output = SectionField(OutputSection)

    def numerics_section(self) -> NumericsSection:
        return self.numerics or NumericsSection()

    def output_section(self) -> OutputSection:
        return self.output or OutputSection()

    def output_formats(self):
        return self.output_section().formats or [OutputFormat.CSV, OutputFormat.JSON]


@dataclass
class LoadedConfig:
    config: RunConfig
    # text of the config file as read, echoed into artifacts
    text: str
    overrides: Dict[str, Any] = field(default_factory=dict)

    def echo(self) -> dict:
        return {
            'text': self.text,
            'overrides': dict(sorted(self.overrides.items())),
            'resolved': self.config.to_dict(),
        }


def _parse_literal(raw: str):
    try:
        return tomllib.loads(f'value = {raw}')['value']
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> Dict[str, Any]:
    """
    FBSDEX_NUMERICS__N_PATHS=1000 -> {'numerics.n_paths': 1000}
    """
    overrides = {}

    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue

        parts = [x.lower() for x in key[len(ENV_PREFIX):].split('__')]

        if len(parts) < 2 or not all(parts):
            logger.warning('Ignoring malformed override variable %s', key)
            continue

        overrides['.'.join(parts)] = _parse_literal(raw)

    return overrides


def _apply_override(data: dict, dotted: str, value):
    *sections, key = dotted.split('.')
    target = data

    for name in sections:
        child = target.setdefault(name, {})

        if not isinstance(child, dict):
            raise ConfigValidationError('Override addresses a value, not a table', dotted)

        target = child

    target[key] = value


def parse_config(text: str, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    :raises:
        ConfigValidationError: on TOML syntax errors and schema violations
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigValidationError(f'Invalid TOML: {e}') from e

    for dotted, value in (overrides or {}).items():
        _apply_override(data, dotted, value)

    return RunConfig.from_dict(data)


def load_config(
    path: Union[str, Path],
    *,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> LoadedConfig:
    """
    Reads a TOML run config, merging environment overrides and then explicit overrides
    (command-line flags) before validation
    """
    path = Path(path)

    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigValidationError(f'Cannot read config file: {e.strerror}', str(path)) from e

    merged = env_overrides(os.environ if environ is None else environ)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    if merged:
        logger.info('Config overrides: %s', ', '.join(sorted(merged)))

    return LoadedConfig(parse_config(text, merged), text, merged)


def _market(section: MarketSection, n_steps: int) -> MarketModel:
    d = section.d1 + section.d2

    if section.which_one_of('theta_spec') == 'theta_breakpoints':
        points = sorted(section.theta_breakpoints, key=lambda x: x.time)

        for i, point in enumerate(points):
            if len(point.value) != d:
                raise ConfigValidationError(
                    f'Expected {d} components, got {len(point.value)}', f'market.theta_breakpoints[{i}].value',
                )

        theta = piecewise_linear_theta([x.time for x in points], [x.value for x in points])
    else:
        values = section.theta if section.theta is not None else [0.0] * d

        if len(values) != d:
            raise ConfigValidationError(f'Expected {d} components, got {len(values)}', 'market.theta')

        theta = values

    return build_market(section.d1, section.d2, theta, section.horizon, n_steps=n_steps)


# parameters each family accepts, with their defaults (None: required)
_FAMILY_PARAMETERS = {
    Family.EXPONENTIAL: {'alpha': 1.0},
    Family.POWER: {'gamma': None},
    Family.LOG: {},
    Family.QUADRATIC: {'b': None},
    Family.MIXTURE_EXP: {'alpha1': 1.0, 'alpha2': 2.0},
    Family.MIXTURE_POWER: {'gamma1': 0.3, 'gamma2': 0.7},
    Family.CUSTOM: {'reference': None},
}

_FACTORIES = {
    Family.EXPONENTIAL: utility.exponential,
    Family.POWER: utility.power,
    Family.LOG: utility.log,
    Family.QUADRATIC: utility.quadratic,
    Family.MIXTURE_EXP: utility.mixture_exp,
    Family.MIXTURE_POWER: utility.mixture_power,
}


def _resolve_custom(reference: str) -> UtilityModel:
    module_name, _, attribute = reference.partition(':')

    if not module_name or not attribute:
        raise ConfigValidationError(f"Expected 'package.module:factory', got {reference!r}", 'utility.reference')

    try:
        factory = getattr(importlib.import_module(module_name), attribute)
    except (ImportError, AttributeError) as e:
        raise ConfigValidationError(f'Cannot resolve {reference!r}: {e}', 'utility.reference') from e

    model = factory()

    if not isinstance(model, UtilityModel):
        raise ConfigValidationError(
            f'Factory {reference!r} returned {type(model).__name__}, expected UtilityModel', 'utility.reference',
        )

    return model


def _utility(section: UtilitySection) -> UtilityModel:
    accepted = _FAMILY_PARAMETERS[section.family]

    for name in UtilitySection.list_fields():
        if name != 'family' and section.has_field(name) and name not in accepted:
            raise ConfigValidationError(
                f'Not a parameter of {section.family.value} utility', f'utility.{name}',
            )

    kwargs = {}

    for name, default in accepted.items():
        value = getattr(section, name)

        if value is None and default is None:
            raise ConfigValidationError('Missing required field', f'utility.{name}')

        kwargs[name] = default if value is None else value

    if section.family is Family.CUSTOM:
        return _resolve_custom(kwargs['reference'])

    return _FACTORIES[section.family](**kwargs)


def _endowment(section: Optional[EndowmentSection]) -> Endowment:
    if section is None:
        return Endowment.none()

    return Endowment(
        kind=section.kind,
        component=section.component,
        a=section.a,
        b=section.b,
        c=section.c,
        strike=section.strike,
        cap=section.cap,
    )


def numerics_config(section: NumericsSection, *, threads: Optional[int] = None) -> NumericsConfig:
    return NumericsConfig(
        n_steps=section.n_steps,
        n_paths=section.n_paths,
        seed=section.seed,
        basis=RegressionBasis(kind=section.basis, degree=section.degree, bins=section.bins),
        fixed_point_tolerance=section.fixed_point_tolerance,
        fixed_point_max_iterations=section.fixed_point_max_iterations,
        damping=section.damping,
        picard_max_iterations=section.picard_max_iterations,
        picard_tolerance=section.picard_tolerance,
        domain_clip=section.domain_clip,
        z=section.z,
        merton_tolerance=section.merton_tolerance,
        threads=threads,
    )


def build_problem(
    config: RunConfig,
    *,
    threads: Optional[int] = None,
) -> Tuple[ProblemSpec, NumericsConfig, SolverKind]:
    """
    :raises:
        ConfigValidationError: when the sections are valid one by one but do not describe a problem
    """
    numerics = numerics_config(config.numerics_section(), threads=threads)

    try:
        spec = ProblemSpec(
            market=_market(config.market, numerics.n_steps),
            utility=_utility(config.utility),
            x0=config.problem.x0,
            endowment=_endowment(config.problem.endowment),
        )
    except ConfigValidationError:
        raise
    except FbsdexError as e:
        raise ConfigValidationError(str(e), 'problem') from e

    return spec, numerics, config.problem.solver
