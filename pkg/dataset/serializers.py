from django.conf import settings
from rest_framework import serializers

Y_TOLERANCE = 1e-6


class StaffSerializer(serializers.Serializer):
    y_center = serializers.FloatField()
    y_top = serializers.FloatField()
    y_bottom = serializers.FloatField()
    x_start = serializers.FloatField(min_value=0)
    x_end = serializers.FloatField(min_value=0)

    def validate(self, data):
        if not data["y_top"] < data["y_center"] < data["y_bottom"]:
            raise serializers.ValidationError("staff_center_inside: y_center must lie between y_top and y_bottom")
        if data["x_end"] <= data["x_start"]:
            raise serializers.ValidationError("staff_extent: x_end must be greater than x_start")
        return data


class PageMetaSerializer(serializers.Serializer):
    dpi = serializers.IntegerField(min_value=1)
    downscale = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)
    width = serializers.IntegerField(min_value=1)
    staves = StaffSerializer(many=True, allow_empty=False)
    seed = serializers.IntegerField(required=False, allow_null=True)
    duplicates = serializers.ListField(
        child=serializers.ListField(child=serializers.IntegerField(), min_length=4, max_length=4),
        required=False,
        default=list,
    )

    def validate(self, data):
        staves = data["staves"]
        for upper, lower in zip(staves, staves[1:]):
            if upper["y_center"] >= lower["y_center"]:
                raise serializers.ValidationError("staves_ordered: staves must be listed top to bottom")
            if upper["y_bottom"] >= lower["y_top"]:
                raise serializers.ValidationError("staves_disjoint: vertical staff extents overlap")
        for staff in staves:
            if staff["y_bottom"] >= data["height"] or staff["x_end"] > data["width"]:
                raise serializers.ValidationError("staff_on_page: a staff reaches outside the page")
        return data


class EventSerializer(serializers.Serializer):
    onset = serializers.FloatField(min_value=0)
    x = serializers.FloatField(min_value=0)
    y = serializers.FloatField(min_value=0)
    staff = serializers.IntegerField(min_value=0)
    pitch = serializers.IntegerField(min_value=0, max_value=127, required=False)
    duration = serializers.FloatField(min_value=0, required=False)


class AlignmentSerializer(serializers.Serializer):
    """Validates align.json against the staves of the page (``context["staves"]``)."""

    events = EventSerializer(many=True, allow_empty=False)

    def validate_events(self, events):
        staves = self.context.get("staves", [])
        onsets = [e["onset"] for e in events]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise serializers.ValidationError("onsets_sorted: events must be sorted by onset time")

        last_x = {}
        for index, event in enumerate(events):
            staff = event["staff"]
            if staff >= len(staves):
                raise serializers.ValidationError(f"staff_index: event {index} refers to unknown staff {staff}")
            if abs(event["y"] - staves[staff]["y_center"]) > Y_TOLERANCE:
                raise serializers.ValidationError(f"y_at_staff_center: event {index} is not on its staff's center line")
            if staff in last_x and event["x"] < last_x[staff]:
                raise serializers.ValidationError(f"x_nondecreasing: event {index} moves left within staff {staff}")
            last_x[staff] = event["x"]
        return events

    def validate(self, data):
        duration = self.context.get("duration")
        if duration is not None and data["events"][-1]["onset"] > duration:
            raise serializers.ValidationError("onsets_within_audio: an onset lies after the end of the audio")
        return data


class FeatureMetaSerializer(serializers.Serializer):
    fps = serializers.IntegerField(min_value=1)
    standardized = serializers.BooleanField()
    n_bins = serializers.IntegerField(min_value=1, required=False)
    # derived from the size of feats.f32 when absent
    frames = serializers.IntegerField(min_value=1, required=False)

    def validate(self, data):
        data.setdefault("n_bins", settings.PAGETRACK["N_BINS"])
        return data
