from django.contrib import admin
from .models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ('id', 'command', 'seed', 'status', 'output_dir', 'created_at')
    list_filter = ('command', 'status', 'created_at')
    search_fields = ('output_dir',)
    readonly_fields = ('config', 'summary', 'created_at')
