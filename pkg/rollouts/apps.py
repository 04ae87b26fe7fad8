from django.apps import AppConfig


class RolloutsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'rollouts'
    verbose_name = 'On-policy rollout sampling'
