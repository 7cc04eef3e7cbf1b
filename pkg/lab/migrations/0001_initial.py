from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('trace', 'Trace'), ('theory', 'Theory'), ('sim', 'Simulation'), ('riskcov', 'Risk-coverage'), ('train_policynet', 'Train PolicyNet'), ('tau0', 'Empirical tau0'), ('corpus', 'Corpus')], max_length=32)),
                ('seed', models.IntegerField(default=0)),
                ('output_dir', models.CharField(max_length=500)),
                ('config', models.JSONField(default=dict)),
                ('summary', models.JSONField(blank=True, default=dict)),
                ('status', models.CharField(choices=[('completed', 'Completed'), ('failed', 'Failed')], default='completed', max_length=20)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
