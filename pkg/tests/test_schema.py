from enum import Enum

import pytest

from fbsdex.exceptions import ConfigValidationError
from fbsdex.schema import Bool, EnumField, Float, Int, Repeated, Section, SectionField, String, one_of


class Color(Enum):
    RED = 'red'
    BLUE = 'blue'


class Point(Section):
    t = Float(min_value=0.0, max_value=1.0, required=True)
    value = Float(required=True)


class Sample(Section):
    count = Int(min_value=1, default=10)
    rate = Float(min_value=0.0, exclusive_min=True)
    label = String()
    enabled = Bool(default=True)
    color = EnumField(Color, default=Color.RED)
    values = Repeated(Float(), min_length=1)
    points = Repeated(SectionField(Point))
    origin = SectionField(Point)
    source = one_of('values', 'points')


int_bad_input = [
    '1',
    1.5,
    True,
    0,
]

float_bad_input = [
    'x',
    False,
    0.0,
    -1.0,
    float('inf'),
    float('nan'),
]


class TestInt:
    @pytest.mark.parametrize('value', int_bad_input)
    def test_validate_bad_input(self, value):
        with pytest.raises(ValueError):
            Int(min_value=1).validate_value(value)

    def test_max_value(self):
        with pytest.raises(ValueError):
            Int(max_value=3).validate_value(4)

        Int(max_value=3).validate_value(3)


class TestFloat:
    @pytest.mark.parametrize('value', float_bad_input)
    def test_validate_bad_input(self, value):
        with pytest.raises(ValueError):
            Float(min_value=0.0, exclusive_min=True).validate_value(value)

    def test_convert_int_to_float(self):
        value = Float().convert(2, 'x')

        assert isinstance(value, float)
        assert value == 2.0

    def test_inclusive_bounds(self):
        Float(min_value=0.0, max_value=1.0).validate_value(0.0)
        Float(min_value=0.0, max_value=1.0).validate_value(1.0)

        with pytest.raises(ValueError):
            Float(max_value=1.0, exclusive_max=True).validate_value(1.0)


class TestEnumField:
    def test_convert(self):
        assert EnumField(Color).convert('blue', 'x') is Color.BLUE

    def test_bad_value(self):
        with pytest.raises(ValueError):
            EnumField(Color).validate_value('green')


class TestRepeated:
    @pytest.mark.parametrize('value', [
        'abc',
        {'a': 1},
        1,
    ])
    def test_rejects_non_sequence(self, value):
        with pytest.raises(ValueError):
            Repeated(Int()).validate_value(value)

    def test_min_length(self):
        with pytest.raises(ValueError):
            Repeated(Int(), min_length=2).validate_value([1])

    def test_item_path_in_error(self):
        with pytest.raises(ConfigValidationError) as e:
            Sample.from_dict({'values': [1.0, 'x']})

        assert e.value.path == 'values[1]'


class TestFromDict:
    def test_defaults(self):
        sample = Sample.from_dict({})

        assert sample.count == 10
        assert sample.enabled is True
        assert sample.color is Color.RED
        assert sample.rate is None
        assert not sample.has_field('count')

    def test_values(self):
        sample = Sample.from_dict({
            'count': 3,
            'rate': 2,
            'label': 'a',
            'color': 'blue',
            'points': [{'t': 0.5, 'value': 1.0}],
        })

        assert sample.count == 3
        assert sample.rate == 2.0
        assert sample.color is Color.BLUE
        assert [x.to_dict() for x in sample.points] == [{'t': 0.5, 'value': 1.0}]
        assert sample.which_one_of('source') == 'points'

    def test_unknown_field(self):
        with pytest.raises(ConfigValidationError) as e:
            Sample.from_dict({'size': 3}, path='sample')

        assert e.value.path == 'sample.size'
        assert 'Unknown field' in str(e.value)

    def test_one_of_conflict(self):
        with pytest.raises(ConfigValidationError) as e:
            Sample.from_dict({'values': [1.0], 'points': []}, path='sample')

        assert e.value.path == 'sample.source'

    def test_missing_required_field(self):
        with pytest.raises(ConfigValidationError) as e:
            Sample.from_dict({'origin': {'t': 0.5}})

        assert e.value.path == 'origin.value'
        assert 'Missing required field' in str(e.value)

    def test_nested_path(self):
        with pytest.raises(ConfigValidationError) as e:
            Sample.from_dict({'points': [{'t': 0.5, 'value': 1.0}, {'t': 2.0, 'value': 1.0}]}, path='sample')

        assert e.value.path == 'sample.points[1].t'

    def test_nested_section_must_be_table(self):
        with pytest.raises(ConfigValidationError) as e:
            Sample.from_dict({'origin': 1.0})

        assert e.value.path == 'origin'


class TestSection:
    def test_unknown_keyword(self):
        with pytest.raises(AttributeError):
            Sample(size=3)

    def test_setter_validates(self):
        sample = Sample()

        with pytest.raises(ValueError):
            sample.count = 0

    def test_setting_one_of_member_clears_the_other(self):
        sample = Sample(values=[1.0])
        sample.points = [Point(t=0.0, value=1.0)]

        assert sample.which_one_of('source') == 'points'
        assert sample.values is None

    def test_which_one_of_unknown_group(self):
        with pytest.raises(ValueError):
            Sample().which_one_of('other')

    def test_has_field_unknown(self):
        with pytest.raises(AttributeError):
            Sample().has_field('size')

    def test_to_dict(self):
        sample = Sample(count=2, color=Color.BLUE, origin=Point(t=0.0, value=1.0), values=[1.0, 2.0])

        assert sample.to_dict() == {
            'count': 2,
            'color': 'blue',
            'origin': {'t': 0.0, 'value': 1.0},
            'values': [1.0, 2.0],
        }

    def test_to_dict_after_from_dict(self):
        data = {'points': [{'t': 0.5, 'value': 1}], 'color': 'blue'}

        assert Sample.from_dict(data).to_dict() == {
            'points': [{'t': 0.5, 'value': 1.0}],
            'color': 'blue',
        }

    def test_list_fields(self):
        assert Point.list_fields() == ['t', 'value']


def test_invalid_default_is_rejected():
    with pytest.raises(ConfigValidationError):
        class Bad(Section):
            count = Int(min_value=1, default=0)


def test_required_one_of_member_is_rejected():
    with pytest.raises(ConfigValidationError):
        class Bad(Section):
            a = Int(required=True)
            b = Int()
            group = one_of('a', 'b')
