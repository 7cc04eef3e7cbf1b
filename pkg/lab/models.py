from django.db import models


class ExperimentRun(models.Model):
    """One management-command invocation and where its outputs went"""
    COMMAND_CHOICES = [
        ('trace', 'Trace'),
        ('theory', 'Theory'),
        ('sim', 'Simulation'),
        ('riskcov', 'Risk-coverage'),
        ('train_policynet', 'Train PolicyNet'),
        ('tau0', 'Empirical tau0'),
        ('corpus', 'Corpus'),
    ]
    STATUS_CHOICES = [
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    command = models.CharField(max_length=32, choices=COMMAND_CHOICES)
    seed = models.IntegerField(default=0)
    output_dir = models.CharField(max_length=500)
    config = models.JSONField(default=dict)
    summary = models.JSONField(default=dict, blank=True)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='completed')
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.command} (seed {self.seed}) -> {self.output_dir}"
