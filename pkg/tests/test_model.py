import pytest
from hypothesis import given, strategies as st

from buildfunc.errors import ConfigError, DegenerateGeometry, InvalidHighLevelPoi
from buildfunc.geometry import Polygon
from buildfunc.model import (Block, BuildingFootprint, ClassScores, FunctionClass, LabelState,
                             PoiRecord, Stage, label_name, parse_label)
from buildfunc.taxonomy import DropReason, Dropped, TaxonomyMap, map_category


class TestFunctionClass:
    def test_codes_follow_table_order(self):
        assert [int(c) for c in FunctionClass] == [1, 2, 3, 4, 5]
        assert FunctionClass.RESIDENTIAL.label == "Residential"
        assert FunctionClass.EDUCATIONAL_CULTURAL.label == "EducationalCultural"

    def test_parse_accepts_codes_and_names(self):
        assert FunctionClass.parse(2) is FunctionClass.COMMERCIAL
        assert FunctionClass.parse("public services") is FunctionClass.PUBLIC_SERVICES
        assert FunctionClass.parse("TechnologyIndustry") is FunctionClass.TECHNOLOGY_INDUSTRY

    def test_unlabeled_helpers(self):
        assert label_name(0) == "Unlabeled"
        assert label_name(None) == "Unlabeled"
        assert parse_label("Unlabeled") is None


class TestClassScores:
    def test_argmax_ties_go_to_lowest_code(self):
        s = ClassScores((0.2, 0.4, 0.4, 0.0, 0.0))
        assert s.argmax() is FunctionClass.COMMERCIAL

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ClassScores((-0.1, 0, 0, 0, 0))

    def test_normalized_must_sum_to_one(self):
        ClassScores((0.2,) * 5, normalized=True)
        with pytest.raises(ValueError):
            ClassScores((0.3,) * 5, normalized=True)


class TestRecords:
    def test_degenerate_polygon(self):
        with pytest.raises(DegenerateGeometry):
            Polygon([(0, 0), (1, 1), (2, 2)])

    def test_high_level_needs_radius(self):
        with pytest.raises(InvalidHighLevelPoi):
            PoiRecord("h1", (0.0, 0.0), "Shopping", FunctionClass.COMMERCIAL, True, None)

    def test_block_total_must_match(self):
        with pytest.raises(ValueError):
            Block("b", Polygon.box(0, 0, 1, 1), (1, 0, 0, 0, 0), 2)

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(0.5, 100), st.booleans())
    def test_round_trip(self, x, y, size, high):
        poly = Polygon.box(x, y, x + size, y + size)
        b = BuildingFootprint("b1", poly, "cell_00000_00000")
        assert BuildingFootprint.from_dict(b.to_dict()) == b
        p = PoiRecord("p1", (x, y), "Shopping", FunctionClass.COMMERCIAL, high,
                      size if high else None, "cell_00000_00000")
        assert PoiRecord.from_dict(p.to_dict()) == p
        blk = Block("k", poly, (1, 2, 0, 0, 3), 6)
        assert Block.from_dict(blk.to_dict()) == blk
        ls = LabelState("b1", FunctionClass.RESIDENTIAL, Stage.REFINED,
                        ClassScores((x * x, 0, 1, 0, size)))
        assert LabelState.from_dict(ls.to_dict()) == ls
        empty = LabelState("b2", None, Stage.CANDIDATE, None)
        assert LabelState.from_dict(empty.to_dict()) == empty


class TestTaxonomy:
    def test_examples(self):
        tax = TaxonomyMap.default()
        assert map_category("Real Estate", tax) is FunctionClass.RESIDENTIAL
        assert map_category("Education and Training Venue", tax) is FunctionClass.EDUCATIONAL_CULTURAL
        assert map_category("natural features", tax) == Dropped(DropReason.EXCLUDED)
        assert map_category("roads", tax) == Dropped(DropReason.EXCLUDED)

    def test_unknown_is_dropped_not_raised(self):
        assert map_category("zzz", TaxonomyMap.default()) == Dropped(DropReason.UNKNOWN)

    @given(st.text())
    def test_total_function(self, raw):
        out = map_category(raw, TaxonomyMap.default())
        assert isinstance(out, (FunctionClass, Dropped))

    def test_every_class_is_a_target(self):
        assert TaxonomyMap.default().targets() == set(FunctionClass)

    def test_life_services_default_and_qualifier(self):
        tax = TaxonomyMap.default()
        assert map_category("Life Services", tax) is FunctionClass.COMMERCIAL
        split = TaxonomyMap.from_text(tax.to_text() + "Life Services;Post Office,PublicServices\n")
        assert map_category("Life Services;Post Office", split) is FunctionClass.PUBLIC_SERVICES
        assert map_category("Life Services;Laundry", split) is FunctionClass.COMMERCIAL

    def test_text_round_trip(self):
        tax = TaxonomyMap.default()
        assert TaxonomyMap.from_text(tax.to_text()) == tax

    def test_conflicting_entries_rejected(self):
        with pytest.raises(ConfigError):
            TaxonomyMap.from_text("Shopping,Commercial\nShopping,EXCLUDE\n")
